mod common;

use cipnet::config::RunConfig;
use cipnet::data::AuditedStream;
use cipnet::run;
use cipnet::trainer::{self, run_stream, train_task, Learner, Phase, RunReport};
use cipnet_tensor::Tensor;
use common::tiny_config;

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn frozen_heads_stay_bit_identical_and_audit_is_clean() {
    let cfg = tiny_config(0);
    let stream = run::build_stream(&cfg).unwrap();
    let audited = AuditedStream::new(&stream);
    let mut learner = Learner::<f32>::new(&cfg).unwrap();
    let mut report = RunReport::default();
    let mut at_end: Vec<Vec<Vec<u32>>> = Vec::new();
    run_stream(&mut learner, &audited, &cfg, &mut report, |_, l, _| {
        at_end.push(l.model.heads.iter().map(|h| bits(&h.weights)).collect());
        Ok(())
    })
    .unwrap();
    for (t, heads) in at_end.iter().enumerate() {
        assert_eq!(heads.len(), t + 1);
        for (h, w) in heads.iter().enumerate() {
            assert_eq!(w, &at_end[h][h], "head {h} changed by task {t}");
        }
    }
    assert!(learner.model.heads.iter().all(|h| h.frozen));
    assert!(learner.model.heads.iter().all(|h| h.weights.data().iter().all(|&w| w >= 0.0)));
    assert_eq!(audited.past_train_accesses(), 0);
    assert!(learner.model.tau() > 0.0);
}

#[test]
fn stability_term_only_after_the_first_task() {
    let cfg = tiny_config(1);
    let outcome = run::train::<f32>(&cfg, None, false).unwrap();
    let tasks = &outcome.report.tasks;
    assert_eq!(tasks[0].stability_evaluations, 0);
    assert!(tasks[1..].iter().all(|t| t.stability_evaluations > 0));
    assert!(outcome.report.tasks[0].epochs.iter().all(|e| e.loss_r.is_none()));
    let no_lr = run::train::<f32>(&cfg.ablated(cipnet::config::Ablation::Stability), None, false).unwrap();
    assert!(no_lr.report.tasks.iter().all(|t| t.stability_evaluations == 0));
}

#[test]
fn identical_config_gives_identical_metrics_csv() {
    let cfg = tiny_config(2);
    let a = run::train::<f32>(&cfg, None, false).unwrap();
    let b = run::train::<f32>(&cfg, None, false).unwrap();
    assert_eq!(trainer::metrics_csv(&a.report).unwrap(), trainer::metrics_csv(&b.report).unwrap());
    assert_eq!(trainer::drift_csv(&a.report).unwrap(), trainer::drift_csv(&b.report).unwrap());
    let other = run::train::<f32>(&tiny_config(3), None, false).unwrap();
    assert_ne!(trainer::metrics_csv(&a.report).unwrap(), trainer::metrics_csv(&other.report).unwrap());
}

#[test]
fn metrics_csv_has_the_documented_columns() {
    let outcome = run::train::<f32>(&tiny_config(4), None, false).unwrap();
    let csv = String::from_utf8(trainer::metrics_csv(&outcome.report).unwrap()).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "task,phase,epoch,loss_total,loss_A,loss_T,loss_R,loss_C,loss_H,loss_D,lr_backbone,lr_head,tau"
    );
    assert_eq!(csv.lines().count(), 1 + 3 * (1 + 2));
    let drift = String::from_utf8(trainer::drift_csv(&outcome.report).unwrap()).unwrap();
    assert_eq!(drift.lines().next().unwrap(), "task,vs_first,vs_previous");
    let first_row: Vec<&str> = drift.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first_row[1].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn head_only_first_training_epoch_leaves_backbone_alone() {
    let cfg = tiny_config(5);
    let outcome = run::train::<f32>(&cfg, None, false).unwrap();
    for task in &outcome.report.tasks {
        let train: Vec<_> = task.epochs.iter().filter(|e| e.phase == Phase::Train).collect();
        assert_eq!(train[0].lr_backbone, 0.0);
        assert!(train[1].lr_backbone > 0.0);
        let pre: Vec<_> = task.epochs.iter().filter(|e| e.phase == Phase::Pretrain).collect();
        assert!(pre.iter().all(|e| e.lr_head.is_none() && e.loss_c.is_none()));
    }
}

#[test]
fn single_task_stream_has_equal_til_and_cil() {
    let mut cfg = tiny_config(6);
    cfg.data.num_classes = 3;
    cfg.data.num_tasks = 1;
    let outcome = run::train::<f32>(&cfg, None, false).unwrap();
    assert_eq!(outcome.report.til, outcome.report.cil);
}

#[test]
fn tasks_must_run_in_order() {
    let cfg = tiny_config(7);
    let stream = run::build_stream(&cfg).unwrap();
    let audited = AuditedStream::new(&stream);
    let mut learner = Learner::<f32>::new(&cfg).unwrap();
    assert!(matches!(train_task(&mut learner, &audited, 1, &cfg), Err(cipnet::Error::Contract(_))));
}

/// Classification loss on task 0 of the default stream, desk preset.
#[test]
fn classification_loss_drops_by_thirty_percent_on_the_default_task() {
    let cfg = RunConfig::desk();
    let stream = run::build_stream(&cfg).unwrap();
    let audited = AuditedStream::new(&stream);
    let mut learner = Learner::<f32>::new(&cfg).unwrap();
    audited.begin_task(0);
    let report = train_task(&mut learner, &audited, 0, &cfg).unwrap();
    let c: Vec<f64> = report.epochs.iter().filter_map(|e| e.loss_c).collect();
    assert!(report.epochs.iter().all(|e| e.loss_total.is_finite()));
    let (first, last) = (c[0], *c.last().unwrap());
    assert!(last <= 0.7 * first, "L_C {first} -> {last}");
}
