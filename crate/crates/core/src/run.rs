//! End-to-end runs: stream construction, training with per-task
//! checkpoints, and the files written into a run directory.

use std::path::{Path, PathBuf};

use cipnet_tensor::Scalar;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, checkpoint_path};
use crate::config::{DataSource, RunConfig};
use crate::data::{self, AuditedStream, TaskStream};
use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::trainer::{self, run_stream, Learner, RunReport};

/// The task stream a config describes; synthetic streams are regenerated
/// from the seed, folder streams are read from disk.
pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let d = &cfg.data;
    let dataset = match d.source {
        DataSource::Synthetic => data::generate_synthetic(d.num_classes, d.per_class, d.image_size, cfg.seed)?,
        DataSource::Folder => {
            let root = d.folder.as_ref().ok_or_else(|| Error::Config("data.folder is not set".into()))?;
            let ds = data::ingest_dataset(root, d.image_size)?;
            if ds.num_classes != d.num_classes {
                return Err(Error::Config(format!(
                    "{} holds {} classes but data.num_classes = {}",
                    root.display(),
                    ds.num_classes,
                    d.num_classes
                )));
            }
            ds
        }
    };
    data::split_tasks(&dataset, d.num_tasks, cfg.seed)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    /// Written verbatim as `config.toml`.
    pub config_text: String,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config_hash: String,
    til: &'a [Vec<f64>],
    cil: &'a [Vec<f64>],
    final_til: Option<f64>,
    final_cil: Option<f64>,
    drift_vs_first: Vec<f64>,
    drift_vs_previous: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunDir {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(rel), bytes)
    }

    fn write_reports(&self, cfg: &RunConfig, report: &RunReport) -> Result<()> {
        self.write("metrics.csv", &trainer::metrics_csv(report)?)?;
        self.write("drift.csv", &trainer::drift_csv(report)?)?;
        self.write("timing.csv", &trainer::timing_csv(report)?)?;
        let summary = Summary {
            config_hash: cfg.hash(),
            til: &report.til,
            cil: &report.cil,
            final_til: report.final_til(),
            final_cil: report.final_cil(),
            drift_vs_first: crate::eval::drift_vs_first(&report.probe, None),
            drift_vs_previous: crate::eval::drift_vs_previous(&report.probe, None),
        };
        let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Contract(format!("summary: {e}")))?;
        self.write("summary.json", &json)
    }

    /// `manifest.json`: every file under the run directory with its digest.
    fn write_manifest(&self) -> Result<()> {
        let mut files = Vec::new();
        collect_files(&self.root, &mut files)?;
        files.sort();
        let mut entries = Vec::new();
        for f in files {
            let rel = f.strip_prefix(&self.root).expect("under root").to_string_lossy().replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            entries.push(ManifestEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        let json = serde_json::to_vec_pretty(&entries).map_err(|e| Error::Contract(format!("manifest: {e}")))?;
        self.write("manifest.json", &json)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub struct RunOutcome<T> {
    pub learner: Learner<T>,
    pub report: RunReport,
    pub stream: TaskStream,
    /// Accesses made to past-task training data; zero for a valid run.
    pub past_train_accesses: usize,
}

/// Train the stream a config describes. With a run directory, each task
/// ends with a checkpoint and refreshed reports; with `resume`, training
/// continues after the newest checkpoint found there.
pub fn train<T: Scalar>(cfg: &RunConfig, dir: Option<&RunDir>, resume: bool) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let restored = match (dir, resume) {
        (Some(d), true) => checkpoint::resume::<T>(&d.root, cfg)?,
        _ => None,
    };
    let (mut learner, mut report) = match restored {
        Some((l, r)) => {
            log::info!("resuming after task {}", l.tasks_done() - 1);
            (l, r)
        }
        None => (Learner::<T>::new(cfg)?, RunReport::default()),
    };
    if let Some(d) = dir {
        std::fs::create_dir_all(&d.root).map_err(|e| Error::io(&d.root, e))?;
        d.write("config.toml", d.config_text.as_bytes())?;
    }
    let audited = AuditedStream::new(&stream);
    run_stream(&mut learner, &audited, cfg, &mut report, |task, l, r| {
        if let Some(d) = dir {
            checkpoint::save(&checkpoint_path(&d.root, task), l, cfg, r)?;
            d.write_reports(cfg, r)?;
        }
        Ok(())
    })?;
    if let Some(d) = dir {
        d.write_reports(cfg, &report)?;
        d.write_manifest()?;
    }
    let past_train_accesses = audited.past_train_accesses();
    Ok(RunOutcome {
        learner,
        report,
        stream,
        past_train_accesses,
    })
}
