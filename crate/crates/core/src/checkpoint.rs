//! Binary checkpoints and resuming at task boundaries.
//!
//! Layout (all integers little-endian, every section starts on an 8-byte
//! boundary):
//!
//! ```text
//! "CIPN"  u32 version
//! u64 tensor count
//!   per tensor: u32 name_len, u8 dtype, u8 rank, u16 0, name, pad8,
//!               rank x u64 dims, raw values, pad8
//! u64 len, registry payload, pad8
//! [u8; 32] config sha256
//! u64 len, config TOML, pad8
//! u64 seed, u64 optimizer step
//! u64 len, JSON meta, pad8
//! ```

use std::path::{Path, PathBuf};

use cipnet_tensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{PrototypeModel, TaskHead};
use crate::persist::write_atomic;
use crate::registry::{snapshot, ProtoRegistry, SnapshotPolicy};
use crate::trainer::{Learner, RunReport};

pub const MAGIC: &[u8; 4] = b"CIPN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub class_ids: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tasks_done: usize,
    pub heads: Vec<HeadMeta>,
    pub learnable_tau: bool,
    pub report: RunReport,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: PrototypeModel<T>,
    pub registry: ProtoRegistry,
    pub config: RunConfig,
    pub config_toml: String,
    pub config_hash: [u8; 32],
    pub seed: u64,
    pub step: u64,
    pub meta: Meta,
}

/// `dir/checkpoints/task-{t}.cipn`
pub fn checkpoint_path(dir: &Path, task: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("task-{task}.cipn"))
}

fn pad8(out: &mut Vec<u8>) {
    while out.len() % 8 != 0 {
        out.push(0);
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
    pad8(out);
}

fn hash_bytes(cfg: &RunConfig) -> [u8; 32] {
    Sha256::digest(cfg.to_toml().as_bytes()).into()
}

pub fn encode<T: Scalar>(learner: &Learner<T>, cfg: &RunConfig, report: &RunReport) -> Result<Vec<u8>> {
    let model = &learner.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let tensors = model.named_tensors();
    put_u64(&mut out, tensors.len() as u64);
    for (name, t) in &tensors {
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.push(T::DTYPE.code());
        out.push(rank);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(name.as_bytes());
        pad8(&mut out);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
        pad8(&mut out);
    }
    put_blob(&mut out, &learner.registry.to_bytes());
    out.extend_from_slice(&hash_bytes(cfg));
    put_blob(&mut out, cfg.to_toml().as_bytes());
    put_u64(&mut out, cfg.seed);
    put_u64(&mut out, learner.step);
    let meta = Meta {
        tasks_done: learner.tasks_done(),
        heads: model
            .heads
            .iter()
            .map(|h| HeadMeta {
                class_ids: h.class_ids.clone(),
                frozen: h.frozen,
            })
            .collect(),
        learnable_tau: model.learnable_tau,
        report: report.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    put_blob(&mut out, &json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn align(&mut self) -> Result<()> {
        let pad = (8 - self.at % 8) % 8;
        if self.take(pad)?.iter().any(|&b| b != 0) {
            return Err(Error::Checkpoint(format!("nonzero padding before offset {}", self.at)));
        }
        Ok(())
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        let b = self.take(n)?;
        self.align()?;
        Ok(b)
    }
}

/// Storage precision of an encoded checkpoint, read from its first tensor.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { bytes, at: 0 };
    header(&mut r)?;
    if r.u64()? == 0 {
        return Err(Error::Checkpoint("checkpoint holds no tensors".into()));
    }
    r.u32()?;
    let code = r.take(1)?[0];
    DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))
}

fn header(r: &mut Reader<'_>) -> Result<()> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Checkpoint(format!("format version {v}, this build reads {VERSION}")));
    }
    Ok(())
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, at: 0 };
    header(&mut r)?;
    let count = r.len()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let code = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        r.take(2)?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        r.align()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{name} is stored as {dtype:?} but was loaded as {:?}",
                T::DTYPE
            )));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let width = std::mem::size_of::<T>();
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        r.align()?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let registry = ProtoRegistry::from_bytes(r.blob()?)?;
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let config_toml = std::str::from_utf8(r.blob()?)
        .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?
        .to_string();
    let seed = r.u64()?;
    let step = r.u64()?;
    let meta: Meta = serde_json::from_slice(r.blob()?).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }

    let config = RunConfig::from_toml(&config_toml)?;
    if hash_bytes(&config) != config_hash {
        return Err(Error::Checkpoint("embedded config does not match its hash".into()));
    }
    let model = rebuild(&config, tensors, &meta)?;
    if registry.prototypes != model.prototypes() || registry.records.len() != meta.tasks_done {
        return Err(Error::Checkpoint("registry does not match the model".into()));
    }
    Ok(Checkpoint {
        model,
        registry,
        config,
        config_toml,
        config_hash,
        seed,
        step,
        meta,
    })
}

fn rebuild<T: Scalar>(config: &RunConfig, tensors: Vec<(String, Tensor<T>)>, meta: &Meta) -> Result<PrototypeModel<T>> {
    let mut model = PrototypeModel::<T>::new(config.backbone(), 1.0, meta.learnable_tau, 0)?;
    let mut seen = vec![false; tensors.len()];
    let mut find = |name: &str| -> Result<Tensor<T>> {
        let i = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        seen[i] = true;
        Ok(tensors[i].1.clone())
    };
    for (i, layer) in model.layers.iter_mut().enumerate() {
        for (slot, kind) in [(&mut layer.weight, "weight"), (&mut layer.bias, "bias")] {
            let t = find(&format!("backbone/{i}/{kind}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "backbone/{i}/{kind} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    for (t, h) in meta.heads.iter().enumerate() {
        let weights = find(&format!("heads/{t}/weights"))?;
        model.heads.push(TaskHead {
            weights,
            class_ids: h.class_ids.clone(),
            frozen: h.frozen,
        });
    }
    let tau = find("tau/log")?;
    if tau.numel() != 1 {
        return Err(Error::Checkpoint("tau/log must hold one value".into()));
    }
    model.log_tau = tau.data()[0];
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!("unexpected tensor {}", tensors[i].0)));
    }
    for h in &model.heads {
        if h.weights.shape() != [h.class_ids.len(), model.prototypes()] {
            return Err(Error::Checkpoint(format!("head shape {:?} does not match its classes", h.weights.shape())));
        }
    }
    Ok(model)
}

pub fn save<T: Scalar>(path: &Path, learner: &Learner<T>, cfg: &RunConfig, report: &RunReport) -> Result<()> {
    write_atomic(path, &encode(learner, cfg, report)?)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&read_bytes(path)?)
}

/// Rebuild a learner from the newest per-task checkpoint in `dir`. Returns
/// `None` when no checkpoint exists yet.
pub fn resume<T: Scalar>(dir: &Path, cfg: &RunConfig) -> Result<Option<(Learner<T>, RunReport)>> {
    let mut last = None;
    while checkpoint_path(dir, last.map_or(0, |t| t + 1)).exists() {
        last = Some(last.map_or(0, |t| t + 1));
    }
    let Some(task) = last else {
        return Ok(None);
    };
    let ck = load::<T>(&checkpoint_path(dir, task))?;
    if ck.config_hash != hash_bytes(cfg) {
        return Err(Error::Config(format!(
            "config hash {} differs from the one stored in {}",
            cfg.hash(),
            checkpoint_path(dir, task).display()
        )));
    }
    if ck.meta.tasks_done != task + 1 {
        return Err(Error::Checkpoint(format!(
            "task-{task} checkpoint records {} finished tasks",
            ck.meta.tasks_done
        )));
    }
    let snapshots = match cfg.stability.snapshots {
        SnapshotPolicy::One => vec![snapshot(&ck.model, task)],
        SnapshotPolicy::All => (0..=task)
            .map(|t| {
                if t == task {
                    Ok(snapshot(&ck.model, t))
                } else {
                    load::<T>(&checkpoint_path(dir, t)).map(|c| snapshot(&c.model, t))
                }
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let learner = Learner {
        model: ck.model,
        registry: ck.registry,
        snapshots,
        step: ck.step,
    };
    Ok(Some((learner, ck.meta.report)))
}
