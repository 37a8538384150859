mod common;

use std::path::Path;

use cipnet::checkpoint::{self, checkpoint_path};
use cipnet::config::RunConfig;
use cipnet::registry::{ProtoRegistry, PrototypeSet, TaskPrototypeRecord};
use cipnet::run::{self, RunDir};
use cipnet::trainer;
use cipnet::Error;
use common::tiny_config;
use sha2::{Digest, Sha256};

fn run_dir(root: &Path, cfg: &RunConfig) -> RunDir {
    RunDir {
        root: root.to_path_buf(),
        config_text: cfg.to_toml(),
    }
}

fn workspace_file(rel: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn shipped_configs_parse_to_the_presets() {
    assert_eq!(RunConfig::from_toml(&workspace_file("configs/default.toml")).unwrap(), RunConfig::default());
    assert_eq!(RunConfig::from_toml(&workspace_file("configs/desk.toml")).unwrap(), RunConfig::desk());
}

#[test]
fn config_toml_round_trips() {
    let cfg = tiny_config(3);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(matches!(RunConfig::from_toml("[trainer]\nbatch_size = \"x\""), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml("[model]\nunknown_key = 1"), Err(Error::Config(_))));
}

#[test]
fn registry_bytes_round_trip_with_documented_size() {
    let d = 11;
    let mut reg = ProtoRegistry::new(d);
    for task in 0..3 {
        let rare = PrototypeSet::from_indices(d, &[task, task + 4, 10]);
        reg.push(TaskPrototypeRecord {
            task,
            important: rare.complement(),
            rare,
            importance: (0..d).map(|k| (k * (task + 1)) as f64 * 0.125).collect(),
        })
        .unwrap();
    }
    let bytes = reg.to_bytes();
    assert_eq!(bytes.len(), ProtoRegistry::payload_size(d, 3));
    assert_eq!(bytes.len(), 8 + 3 * (2 * 2 + 8 * 11));
    assert_eq!(ProtoRegistry::from_bytes(&bytes).unwrap(), reg);
    assert!(ProtoRegistry::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let cfg = tiny_config(0);
    let outcome = run::train::<f32>(&cfg, None, false).unwrap();
    let bytes = checkpoint::encode(&outcome.learner, &cfg, &outcome.report).unwrap();
    let ck = checkpoint::decode::<f32>(&bytes).unwrap();
    assert_eq!(ck.model, outcome.learner.model);
    assert_eq!(ck.registry, outcome.learner.registry);
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.seed, cfg.seed);
    assert_eq!(ck.step, outcome.learner.step);
    assert_eq!(ck.meta.report, outcome.report);
    assert_eq!(checkpoint::encode(&outcome.learner, &cfg, &outcome.report).unwrap(), bytes);

    // Stored as f32, so loading as f64 is refused rather than converted.
    assert!(matches!(checkpoint::decode::<f64>(&bytes), Err(Error::Checkpoint(_))));

    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(checkpoint::decode::<f32>(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(checkpoint::decode::<f32>(&bad_magic), Err(Error::Checkpoint(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(checkpoint::decode::<f32>(&trailing), Err(Error::Checkpoint(_))));
}

#[test]
fn resume_after_interruption_matches_an_uninterrupted_run() {
    let cfg = tiny_config(1);
    let full = tempfile::tempdir().unwrap();
    let whole = run::train::<f32>(&cfg, Some(&run_dir(full.path(), &cfg)), false).unwrap();

    let part = tempfile::tempdir().unwrap();
    run::train::<f32>(&cfg, Some(&run_dir(part.path(), &cfg)), false).unwrap();
    std::fs::remove_file(checkpoint_path(part.path(), 2)).unwrap();
    let resumed = run::train::<f32>(&cfg, Some(&run_dir(part.path(), &cfg)), true).unwrap();

    assert_eq!(resumed.learner.model, whole.learner.model);
    assert_eq!(resumed.learner.registry, whole.learner.registry);
    assert_eq!(resumed.learner.step, whole.learner.step);
    assert_eq!(
        trainer::metrics_csv(&resumed.report).unwrap(),
        trainer::metrics_csv(&whole.report).unwrap()
    );
    for f in ["metrics.csv", "drift.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(part.path().join(f)).unwrap(),
            std::fs::read(full.path().join(f)).unwrap(),
            "{f}"
        );
    }
    // Checkpoints also carry wall-clock timings, so compare what they decode to.
    let a = checkpoint::load::<f32>(&checkpoint_path(part.path(), 2)).unwrap();
    let b = checkpoint::load::<f32>(&checkpoint_path(full.path(), 2)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.registry, b.registry);
    assert_eq!(a.step, b.step);
}

#[test]
fn resume_with_a_different_config_is_a_config_error() {
    let cfg = tiny_config(2);
    let dir = tempfile::tempdir().unwrap();
    run::train::<f32>(&cfg, Some(&run_dir(dir.path(), &cfg)), false).unwrap();
    let mut other = cfg.clone();
    other.trainer.lr_head *= 2.0;
    let err = run::train::<f32>(&other, Some(&run_dir(dir.path(), &other)), true).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn manifest_lists_every_artifact_with_its_digest() {
    let cfg = tiny_config(4);
    let dir = tempfile::tempdir().unwrap();
    run::train::<f32>(&cfg, Some(&run_dir(dir.path(), &cfg)), false).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    let paths: Vec<&str> = entries.iter().map(|e| e["path"].as_str().unwrap()).collect();
    for want in ["config.toml", "metrics.csv", "drift.csv", "timing.csv", "summary.json", "checkpoints/task-0.cipn"] {
        assert!(paths.contains(&want), "{want} missing from {paths:?}");
    }
    for e in entries {
        let bytes = std::fs::read(dir.path().join(e["path"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(e["sha256"].as_str().unwrap(), hex);
        assert_eq!(e["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    let written = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&written).unwrap(), cfg);
}
