//! Activation-frequency bookkeeping, rare/important prototype sets and the
//! frozen model snapshots used by the stability term.

use std::sync::Arc;

use cipnet_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::PrototypeModel;

/// Fixed-size set of prototype indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrototypeSet {
    len: usize,
    bits: Vec<u8>,
}

impl PrototypeSet {
    pub fn empty(len: usize) -> Self {
        Self {
            len,
            bits: vec![0; len.div_ceil(8)],
        }
    }

    pub fn full(len: usize) -> Self {
        let mut s = Self::empty(len);
        (0..len).for_each(|d| s.insert(d));
        s
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut s = Self::empty(len);
        indices.iter().for_each(|&d| s.insert(d));
        s
    }

    pub fn universe(&self) -> usize {
        self.len
    }

    pub fn insert(&mut self, d: usize) {
        assert!(d < self.len, "prototype {d} outside set of {}", self.len);
        self.bits[d / 8] |= 1 << (d % 8);
    }

    pub fn contains(&self, d: usize) -> bool {
        d < self.len && self.bits[d / 8] & (1 << (d % 8)) != 0
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&d| self.contains(d)).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.len, other.len);
        Self {
            len: self.len,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        }
    }

    pub fn complement(&self) -> Self {
        let mut s = Self::empty(self.len);
        (0..self.len).filter(|&d| !self.contains(d)).for_each(|d| s.insert(d));
        s
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Checkpoint(format!(
                "bitset of {len} needs {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        let s = Self {
            len,
            bits: bytes.to_vec(),
        };
        if (len..len.div_ceil(8) * 8).any(|d| s.bits[d / 8] & (1 << (d % 8)) != 0) {
            return Err(Error::Checkpoint("bitset has bits beyond its length".into()));
        }
        Ok(s)
    }
}

/// Per-prototype activation counts over the views seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    threshold: f64,
    events: Vec<u64>,
    samples: u64,
}

impl ActivationStats {
    pub fn new(prototypes: usize, threshold: f64) -> Self {
        Self {
            threshold,
            events: vec![0; prototypes],
            samples: 0,
        }
    }

    /// Count every `p[b, d] >= threshold` as one event for prototype `d`.
    pub fn record_batch<T: Scalar>(&mut self, p: &Tensor<T>) -> Result<()> {
        let d = self.events.len();
        if p.rank() != 2 || p.shape()[1] != d {
            return Err(Error::Contract(format!("record_batch expects [B, {d}], got {:?}", p.shape())));
        }
        let t = T::of(self.threshold);
        for row in p.data().chunks_exact(d) {
            for (e, &v) in self.events.iter_mut().zip(row) {
                if v >= t {
                    *e += 1;
                }
            }
        }
        self.samples += p.shape()[0] as u64;
        Ok(())
    }

    pub fn events(&self) -> &[u64] {
        &self.events
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn frequencies(&self) -> Result<Vec<f64>> {
        if self.samples == 0 {
            return Err(Error::Contract("activation statistics cover zero samples".into()));
        }
        Ok(self.events.iter().map(|&e| e as f64 / self.samples as f64).collect())
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile_linear(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Prototypes whose frequency lies strictly below the `q`-th percentile,
/// plus every prototype that never reached the activation threshold.
pub fn rare_set(frequencies: &[f64], q: f64) -> PrototypeSet {
    let cut = percentile_linear(frequencies, q);
    let rare: Vec<usize> = (0..frequencies.len())
        .filter(|&d| frequencies[d] < cut || frequencies[d] == 0.0)
        .collect();
    PrototypeSet::from_indices(frequencies.len(), &rare)
}

/// `max_c |w[c, d]|` for a `[C, D]` head.
pub fn head_importance<T: Scalar>(weights: &Tensor<T>) -> Vec<f64> {
    let d = weights.shape()[1];
    let mut imp = vec![0.0f64; d];
    for row in weights.data().chunks_exact(d) {
        for (m, &w) in imp.iter_mut().zip(row) {
            *m = m.max(w.f64().abs());
        }
    }
    imp
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrototypeRecord {
    pub task: usize,
    pub rare: PrototypeSet,
    pub important: PrototypeSet,
    pub importance: Vec<f64>,
}

pub fn finalize_task<T: Scalar>(
    task: usize,
    stats: &ActivationStats,
    head_weights: &Tensor<T>,
    percentile: f64,
) -> Result<TaskPrototypeRecord> {
    let freqs = stats.frequencies()?;
    if head_weights.rank() != 2 || head_weights.shape()[1] != freqs.len() {
        return Err(Error::Contract(format!(
            "head {:?} does not match {} prototypes",
            head_weights.shape(),
            freqs.len()
        )));
    }
    let rare = rare_set(&freqs, percentile);
    Ok(TaskPrototypeRecord {
        task,
        important: rare.complement(),
        rare,
        importance: head_importance(head_weights),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotPolicy {
    /// Keep only the model frozen at the end of the previous task.
    #[default]
    One,
    /// Keep one frozen model per finished task.
    All,
}

/// Finalized per-task records plus the provisional rare set of the running task.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoRegistry {
    pub prototypes: usize,
    pub records: Vec<TaskPrototypeRecord>,
    provisional: Option<PrototypeSet>,
}

const REGISTRY_HEADER: usize = 8;

impl ProtoRegistry {
    pub fn new(prototypes: usize) -> Self {
        Self {
            prototypes,
            records: Vec::new(),
            provisional: None,
        }
    }

    /// Replace the running task's rare-set estimate, e.g. from last epoch's stats.
    pub fn set_provisional(&mut self, rare: Option<PrototypeSet>) {
        self.provisional = rare;
    }

    pub fn provisional(&self) -> Option<&PrototypeSet> {
        self.provisional.as_ref()
    }

    /// Union of finalized rare sets and the provisional one. Before any
    /// statistics exist this is every prototype.
    pub fn current_rare_union(&self) -> PrototypeSet {
        if self.records.is_empty() && self.provisional.is_none() {
            return PrototypeSet::full(self.prototypes);
        }
        let mut u = self.provisional.clone().unwrap_or_else(|| PrototypeSet::empty(self.prototypes));
        for r in &self.records {
            u = u.union(&r.rare);
        }
        u
    }

    /// Union of every finalized important set.
    pub fn regularized(&self) -> PrototypeSet {
        self.records
            .iter()
            .fold(PrototypeSet::empty(self.prototypes), |u, r| u.union(&r.important))
    }

    /// Prototypes the stability term protects while task `task` trains.
    pub fn regularized_during(&self, task: usize) -> PrototypeSet {
        self.records
            .iter()
            .filter(|r| r.task < task)
            .fold(PrototypeSet::empty(self.prototypes), |u, r| u.union(&r.important))
    }

    pub fn push(&mut self, record: TaskPrototypeRecord) -> Result<()> {
        if record.rare.universe() != self.prototypes || record.importance.len() != self.prototypes {
            return Err(Error::Contract("record size does not match registry".into()));
        }
        if record.task != self.records.len() {
            return Err(Error::Contract(format!(
                "record for task {} but registry expects task {}",
                record.task,
                self.records.len()
            )));
        }
        self.records.push(record);
        self.provisional = None;
        Ok(())
    }

    /// Byte size of [`Self::to_bytes`] for `tasks` finalized records.
    pub fn payload_size(prototypes: usize, tasks: usize) -> usize {
        REGISTRY_HEADER + tasks * (2 * prototypes.div_ceil(8) + 8 * prototypes)
    }

    /// `D: u32, tasks: u32`, then per task the rare bitset, the important
    /// bitset and `D` little-endian f64 importances.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::payload_size(self.prototypes, self.records.len()));
        out.extend_from_slice(&(self.prototypes as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(r.rare.as_bytes());
            out.extend_from_slice(r.important.as_bytes());
            for v in &r.importance {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Checkpoint("registry payload truncated".into());
        let word = |at: usize| -> Result<usize> {
            let b = bytes.get(at..at + 4).ok_or_else(short)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let (d, tasks) = (word(0)?, word(4)?);
        if bytes.len() != Self::payload_size(d, tasks) {
            return Err(Error::Checkpoint(format!(
                "registry payload is {} bytes, expected {}",
                bytes.len(),
                Self::payload_size(d, tasks)
            )));
        }
        let nb = d.div_ceil(8);
        let mut reg = Self::new(d);
        let mut at = REGISTRY_HEADER;
        for task in 0..tasks {
            let rare = PrototypeSet::from_bytes(d, &bytes[at..at + nb])?;
            let important = PrototypeSet::from_bytes(d, &bytes[at + nb..at + 2 * nb])?;
            at += 2 * nb;
            let importance = bytes[at..at + 8 * d]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += 8 * d;
            if important != rare.complement() {
                return Err(Error::Checkpoint(format!("task {task}: sets do not partition prototypes")));
            }
            reg.push(TaskPrototypeRecord {
                task,
                rare,
                important,
                importance,
            })?;
        }
        Ok(reg)
    }
}

/// SHA-256 over every named parameter tensor.
pub fn parameter_digest<T: Scalar>(model: &PrototypeModel<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in model.named_tensors() {
        h.update(name.as_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize().into()
}

/// Read-only copy of the model at the end of a task.
#[derive(Debug, Clone)]
pub struct FrozenSnapshot<T> {
    pub task: usize,
    model: Arc<PrototypeModel<T>>,
    digest: [u8; 32],
}

impl<T: Scalar> FrozenSnapshot<T> {
    pub fn model(&self) -> &PrototypeModel<T> {
        &self.model
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Recompute the digest and compare with the one taken at creation.
    pub fn verify(&self) -> bool {
        parameter_digest(&self.model) == self.digest
    }
}

pub fn snapshot<T: Scalar>(model: &PrototypeModel<T>, task: usize) -> FrozenSnapshot<T> {
    FrozenSnapshot {
        task,
        digest: parameter_digest(model),
        model: Arc::new(model.clone()),
    }
}
