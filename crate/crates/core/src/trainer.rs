//! Two-phase per-task training and the continual run loop.

use std::time::Instant;

use cipnet_tensor::{Gradients, Scalar, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, AuditedStream, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, DriftProbe};
use crate::losses::{self, LossTerms, StabilityTerm};
use crate::model::{init_head, PrototypeModel, Trainable};
use crate::optim::{lr_schedule, AdamHyper, AdamState, Schedule};
use crate::registry::{
    self, finalize_task, rare_set, ActivationStats, FrozenSnapshot, ProtoRegistry, SnapshotPolicy,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Train => 2,
        }
    }
}

/// Batch-averaged loss terms of one epoch. `None` marks terms not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub task: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_a: f64,
    pub loss_t: f64,
    pub loss_r: Option<f64>,
    pub loss_c: Option<f64>,
    pub loss_h: Option<f64>,
    pub loss_d: Option<f64>,
    pub lr_backbone: f64,
    pub lr_head: Option<f64>,
    pub tau: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Steps on which the stability term was evaluated.
    pub stability_evaluations: usize,
}

/// Everything that persists between tasks.
#[derive(Debug, Clone)]
pub struct Learner<T> {
    pub model: PrototypeModel<T>,
    pub registry: ProtoRegistry,
    pub snapshots: Vec<FrozenSnapshot<T>>,
    /// Optimizer steps taken so far in the run.
    pub step: u64,
}

impl<T: Scalar> Learner<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = PrototypeModel::new(
            cfg.backbone(),
            cfg.model.tau_init,
            cfg.model.learnable_tau,
            seed::derive(&[cfg.seed, 0x6D6F_6465]),
        )?;
        Ok(Self {
            registry: ProtoRegistry::new(model.prototypes()),
            model,
            snapshots: Vec::new(),
            step: 0,
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.registry.records.len()
    }
}

fn hyper(cfg: &RunConfig) -> AdamHyper {
    AdamHyper {
        beta1: cfg.trainer.beta1,
        beta2: cfg.trainer.beta2,
        eps: cfg.trainer.adam_eps,
        weight_decay: cfg.trainer.weight_decay,
    }
}

/// Adam moments for every parameter group of one phase.
struct Optimizers<T> {
    backbone: Vec<(AdamState<T>, AdamState<T>)>,
    head: Option<AdamState<T>>,
    tau: AdamState<T>,
}

impl<T: Scalar> Optimizers<T> {
    fn new(model: &PrototypeModel<T>, head: Option<usize>) -> Self {
        Self {
            backbone: model
                .layers
                .iter()
                .map(|l| (AdamState::new(l.weight.numel()), AdamState::new(l.bias.numel())))
                .collect(),
            head: head.map(|h| AdamState::new(model.heads[h].weights.numel())),
            tau: AdamState::new(1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rates {
    backbone: f64,
    head: f64,
    tau: f64,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default)]
struct StepValues {
    total: f64,
    a: f64,
    t: f64,
    r: Option<f64>,
    c: Option<f64>,
    h: Option<f64>,
    d: Option<f64>,
}

/// Attach the step index and term name to numeric failures.
fn term<V>(step: u64, name: &'static str, r: std::result::Result<V, impl Into<Error>>) -> Result<V> {
    r.map_err(|e| match e.into() {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFinite { step, term: name },
        other => other,
    })
}

fn value<T: Scalar>(step: u64, name: &'static str, v: &Var<'_, T>) -> Result<f64> {
    let x = term(step, name, v.item())?.f64();
    if !x.is_finite() {
        return Err(Error::NonFinite { step, term: name });
    }
    Ok(x)
}

struct StepPlan<'a, T> {
    task: usize,
    trainable: Trainable,
    supervised: bool,
    lambda_a: f64,
    rare: &'a [usize],
    stability: Vec<StabilityTerm<T>>,
}

fn apply_updates<T: Scalar>(
    learner: &mut Learner<T>,
    grads: &Gradients<T>,
    vars: &BoundVars<'_, T>,
    opt: &mut Optimizers<T>,
    rates: Rates,
    hp: &AdamHyper,
    plan: &StepPlan<'_, T>,
) {
    let model = &mut learner.model;
    if plan.trainable.backbone {
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            let (sw, sb) = &mut opt.backbone[i];
            if let Some(g) = grads.get(w) {
                sw.update(model.layers[i].weight.data_mut(), g.data(), rates.backbone, hp);
            }
            if let Some(g) = grads.get(b) {
                sb.update(model.layers[i].bias.data_mut(), g.data(), rates.backbone, hp);
            }
        }
    }
    if let (Some(h), Some(state)) = (plan.trainable.head, opt.head.as_mut()) {
        if let Some(g) = grads.get(&vars.heads[h]) {
            let head = &mut model.heads[h];
            state.update(head.weights.data_mut(), g.data(), rates.head, hp);
            head.clamp_nonnegative();
        }
    }
    if plan.trainable.tau && model.learnable_tau {
        if let Some(g) = grads.get(&vars.log_tau) {
            let mut v = [model.log_tau];
            opt.tau.update(&mut v, g.data(), rates.tau, hp);
            model.log_tau = v[0];
        }
    }
}

struct BoundVars<'t, T: Scalar> {
    layers: Vec<(Var<'t, T>, Var<'t, T>)>,
    heads: Vec<Var<'t, T>>,
    log_tau: Var<'t, T>,
}

/// Forward both views, evaluate the objective, backpropagate once and update.
fn train_step<T: Scalar>(
    learner: &mut Learner<T>,
    views: Tensor<T>,
    labels: &[usize],
    plan: &StepPlan<'_, T>,
    cfg: &RunConfig,
    opt: &mut Optimizers<T>,
    rates: Rates,
    stats: &mut ActivationStats,
) -> Result<StepValues> {
    let step = learner.step;
    let w = &cfg.losses;
    let b = views.shape()[0] / 2;
    let tape = Tape::new();
    let bound = learner.model.bind(&tape, plan.trainable);
    let f = term(step, "features", bound.features(tape.constant(views)))?;
    let first: Vec<usize> = (0..b).collect();
    let second: Vec<usize> = (b..2 * b).collect();

    let z1 = term(step, "loss_A", f.zsoft.select(0, &first))?;
    let z2 = term(step, "loss_A", f.zsoft.select(0, &second))?;
    let align = term(step, "loss_A", losses::loss_align(z1, z2))?;

    let tanh = term(step, "loss_T", (|| -> Result<Var<'_, T>> {
        let p1 = f.presence.select(0, &first)?;
        let p2 = f.presence.select(0, &second)?;
        let t1 = losses::loss_tanh_filtered(p1, plan.rare, w.eps_t)?;
        let t2 = losses::loss_tanh_filtered(p2, plan.rare, w.eps_t)?;
        Ok(t1.add(t2)?.mul_scalar(0.5)?)
    })())?;

    let stability = if plan.stability.is_empty() {
        None
    } else {
        Some(term(step, "loss_R", losses::loss_stability(f.presence, &plan.stability))?)
    };

    let (total, terms) = if plan.supervised {
        let head = bound.heads[plan.task];
        let scores = term(step, "loss_C", bound.all_scores(f.presence))?;
        let terms = LossTerms {
            align,
            tanh,
            stability,
            classification: Some(term(step, "loss_C", losses::loss_classification(scores, labels))?),
            hoyer: Some(term(step, "loss_H", losses::loss_hoyer(head, w.eps_h))?),
            decorrelation: Some(term(
                step,
                "loss_D",
                losses::loss_decorrelation(&bound.heads[..plan.task], head),
            )?),
        };
        (term(step, "loss_total", losses::loss_total(w, &terms))?, terms)
    } else {
        let total = term(step, "loss_total", losses::loss_pretrain(w, plan.lambda_a, align, tanh, stability))?;
        let terms = LossTerms {
            align,
            tanh,
            stability,
            classification: None,
            hoyer: None,
            decorrelation: None,
        };
        (total, terms)
    };

    let opt_value = |name, v: Option<Var<'_, T>>| v.map(|v| value(step, name, &v)).transpose();
    let values = StepValues {
        total: value(step, "loss_total", &total)?,
        a: value(step, "loss_A", &terms.align)?,
        t: value(step, "loss_T", &terms.tanh)?,
        r: opt_value("loss_R", terms.stability)?,
        c: opt_value("loss_C", terms.classification)?,
        h: opt_value("loss_H", terms.hoyer)?,
        d: opt_value("loss_D", terms.decorrelation)?,
    };
    stats.record_batch(&f.presence.value())?;

    let grads = term(step, "loss_total", total.backward())?;
    let vars = BoundVars {
        layers: bound.layers.clone(),
        heads: bound.heads.clone(),
        log_tau: bound.log_tau,
    };
    drop(bound);
    apply_updates(learner, &grads, &vars, opt, rates, &hyper(cfg), plan);
    learner.step += 1;
    Ok(values)
}

/// Presence of the current batch under each frozen model the policy keeps,
/// paired with the records of the tasks they stand in for.
fn stability_terms<T: Scalar>(learner: &Learner<T>, views: &Tensor<T>, policy: SnapshotPolicy) -> Result<Vec<StabilityTerm<T>>> {
    let records = &learner.registry.records;
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let snapshot_for = |t: usize| -> Result<&FrozenSnapshot<T>> {
        let found = match policy {
            SnapshotPolicy::One => learner.snapshots.last(),
            SnapshotPolicy::All => learner.snapshots.iter().find(|s| s.task == t),
        };
        found.ok_or_else(|| Error::Contract(format!("no frozen snapshot available for task {t}")))
    };
    let mut cache: Vec<(usize, Tensor<T>)> = Vec::new();
    let mut terms = Vec::with_capacity(records.len());
    for r in records {
        let snap = snapshot_for(r.task)?;
        let frozen = match cache.iter().find(|(t, _)| *t == snap.task) {
            Some((_, p)) => p.clone(),
            None => {
                let (_, p) = snap.model().forward_features(views)?;
                cache.push((snap.task, p.clone()));
                p
            }
        };
        terms.push(StabilityTerm {
            important: r.important.indices(),
            importance: r.importance.clone(),
            frozen,
        });
    }
    Ok(terms)
}

fn epoch_order(n: usize, cfg: &RunConfig, task: usize, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let s = seed::derive(&[cfg.seed, task as u64, phase.code(), epoch as u64, 0x0BA7]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

fn batch_views<T: Scalar>(
    samples: &[Sample],
    idx: &[usize],
    cfg: &RunConfig,
    task: usize,
    phase: Phase,
    epoch: usize,
) -> (Tensor<T>, Vec<usize>) {
    let picked: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let seed = seed::derive(&[cfg.seed, task as u64, phase.code()]);
    let batch = data::make_views::<T>(&picked, cfg.data.image_size, &cfg.data.augment, seed, epoch as u64);
    let views = Tensor::stack(&[&batch.view1, &batch.view2])
        .and_then(|t| {
            let mut s = batch.view1.shape().to_vec();
            s[0] *= 2;
            t.reshaped(&s)
        })
        .expect("views share a shape");
    let mut labels = batch.labels.clone();
    labels.extend_from_slice(&batch.labels);
    (views, labels)
}

/// Train task `task` on its training split: pretraining, head-only epoch,
/// joint fine-tuning, then registry finalisation and snapshot.
pub fn train_task<T: Scalar>(learner: &mut Learner<T>, stream: &AuditedStream<'_>, task: usize, cfg: &RunConfig) -> Result<TaskReport> {
    if learner.tasks_done() != task || learner.model.heads.len() != task {
        return Err(Error::Contract(format!(
            "task {task} requested but {} tasks are finalized",
            learner.tasks_done()
        )));
    }
    if learner.model.heads.iter().any(|h| !h.frozen) {
        return Err(Error::Contract("earlier heads must be frozen".into()));
    }
    let samples = stream.train(task);
    if samples.is_empty() {
        return Err(Error::Contract(format!("task {task} has no training data")));
    }
    let tc = &cfg.trainer;
    let d = learner.model.prototypes();
    let mut report = TaskReport {
        task,
        epochs: Vec::new(),
        stability_evaluations: 0,
    };
    let mut last_stats = None;
    let use_stability = task > 0 && cfg.losses.lambda_r > 0.0;

    let phases = [(Phase::Pretrain, tc.epochs_pretrain), (Phase::Train, tc.epochs_train)];
    for (phase, epochs) in phases {
        if phase == Phase::Train {
            let classes = stream.classes(task).to_vec();
            let head_seed = seed::derive(&[cfg.seed, task as u64, 0x4845_4144]);
            learner.model.add_head(init_head(classes, d, head_seed))?;
        }
        let mut opt = Optimizers::new(&learner.model, (phase == Phase::Train).then_some(task));
        for epoch in 0..epochs {
            let started = Instant::now();
            let (trainable, rates, lambda_a) = match phase {
                Phase::Pretrain => (
                    Trainable { backbone: true, head: None, tau: false },
                    Rates {
                        backbone: lr_schedule(Schedule::Cosine, tc.lr_backbone, epoch, epochs),
                        head: 0.0,
                        tau: 0.0,
                    },
                    if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 1.0 },
                ),
                Phase::Train => (
                    Trainable { backbone: epoch > 0, head: Some(task), tau: epoch > 0 },
                    Rates {
                        backbone: lr_schedule(Schedule::Cosine, tc.lr_backbone, epoch, epochs),
                        head: lr_schedule(Schedule::CosineRestarts { cycles: tc.head_restarts }, tc.lr_head, epoch, epochs),
                        tau: lr_schedule(Schedule::Cosine, tc.lr_tau, epoch, epochs),
                    },
                    cfg.losses.lambda_a,
                ),
            };
            let rare = learner.registry.current_rare_union().indices();
            let mut stats = ActivationStats::new(d, cfg.registry.activation_threshold);
            let mut sums = StepValues::default();
            let mut batches = 0usize;
            let order = epoch_order(samples.len(), cfg, task, phase, epoch);
            for idx in order.chunks(tc.batch_size) {
                let (views, labels) = batch_views::<T>(samples, idx, cfg, task, phase, epoch);
                let stability = if use_stability {
                    stability_terms(learner, &views, cfg.stability.snapshots)?
                } else {
                    Vec::new()
                };
                if !stability.is_empty() {
                    report.stability_evaluations += 1;
                }
                let plan = StepPlan {
                    task,
                    trainable,
                    supervised: phase == Phase::Train,
                    lambda_a,
                    rare: &rare,
                    stability,
                };
                let v = train_step(learner, views, &labels, &plan, cfg, &mut opt, rates, &mut stats)?;
                let add = |acc: &mut Option<f64>, x: Option<f64>| {
                    if let Some(x) = x {
                        *acc = Some(acc.unwrap_or(0.0) + x);
                    }
                };
                sums.total += v.total;
                sums.a += v.a;
                sums.t += v.t;
                add(&mut sums.r, v.r);
                add(&mut sums.c, v.c);
                add(&mut sums.h, v.h);
                add(&mut sums.d, v.d);
                batches += 1;
            }
            let n = batches as f64;
            let mean = |x: Option<f64>| x.map(|x| x / n);
            report.epochs.push(EpochMetrics {
                task,
                phase,
                epoch,
                loss_total: sums.total / n,
                loss_a: sums.a / n,
                loss_t: sums.t / n,
                loss_r: mean(sums.r),
                loss_c: mean(sums.c),
                loss_h: mean(sums.h),
                loss_d: mean(sums.d),
                lr_backbone: if trainable.backbone { rates.backbone } else { 0.0 },
                lr_head: (phase == Phase::Train).then_some(rates.head),
                tau: learner.model.tau().f64(),
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            let freqs = stats.frequencies()?;
            let provisional = rare_set(&freqs, cfg.registry.percentile);
            log::debug!(
                "task {task} {} epoch {epoch}: {} rare prototypes, {} never active",
                phase.name(),
                provisional.count(),
                freqs.iter().filter(|&&f| f == 0.0).count()
            );
            learner.registry.set_provisional(Some(provisional));
            log::info!(
                "task {task} {} epoch {epoch}: loss {:.4}",
                phase.name(),
                sums.total / n
            );
            last_stats = Some(stats);
        }
    }

    let stats = last_stats.ok_or_else(|| Error::Contract("task ran zero epochs".into()))?;
    let record = finalize_task(task, &stats, &learner.model.heads[task].weights, cfg.registry.percentile)?;
    learner.registry.push(record)?;
    learner.model.heads[task].frozen = true;
    let snap = registry::snapshot(&learner.model, task);
    match cfg.stability.snapshots {
        SnapshotPolicy::One => learner.snapshots = vec![snap],
        SnapshotPolicy::All => learner.snapshots.push(snap),
    }
    Ok(report)
}

/// Accuracies and drift probes accumulated over a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub tasks: Vec<TaskReport>,
    /// `til[t][s]`: TIL accuracy on task `s` after training task `t`.
    pub til: Vec<Vec<f64>>,
    pub cil: Vec<Vec<f64>>,
    pub probe: DriftProbe,
}

impl RunReport {
    pub fn final_til(&self) -> Option<f64> {
        self.til.last().map(|v| eval::final_average(v))
    }

    pub fn final_cil(&self) -> Option<f64> {
        self.cil.last().map(|v| eval::final_average(v))
    }

    pub fn metrics(&self) -> impl Iterator<Item = &EpochMetrics> {
        self.tasks.iter().flat_map(|t| t.epochs.iter())
    }
}

/// Evaluate every seen task and record the drift probe for the model as it
/// stands after `task`.
pub fn evaluate_after_task<T: Scalar>(
    learner: &Learner<T>,
    stream: &AuditedStream<'_>,
    task: usize,
    cfg: &RunConfig,
    report: &mut RunReport,
) -> Result<()> {
    let tests: Vec<&[Sample]> = (0..=task).map(|s| stream.test(s)).collect();
    let (til, cil) = eval::evaluate_tasks(&learner.model, &tests, cfg.eval.presence_threshold)?;
    report.til.push(til);
    report.cil.push(cil);
    let probes = stream.test(0);
    if report.probe.labels.is_empty() {
        report.probe = DriftProbe::new(probes.iter().map(|s| s.label).collect(), learner.model.prototypes());
    }
    let (p, _) = eval::presence(&learner.model, probes)?;
    report.probe.record(&p)?;
    Ok(())
}

/// Train the remaining tasks in order. `on_task_end` runs after each task's
/// evaluation, e.g. to write checkpoints.
pub fn run_stream<T: Scalar>(
    learner: &mut Learner<T>,
    stream: &AuditedStream<'_>,
    cfg: &RunConfig,
    report: &mut RunReport,
    mut on_task_end: impl FnMut(usize, &Learner<T>, &RunReport) -> Result<()>,
) -> Result<()> {
    for task in learner.tasks_done()..stream.num_tasks() {
        stream.begin_task(task);
        let r = train_task(learner, stream, task, cfg)?;
        stream.end_task();
        report.tasks.push(r);
        evaluate_after_task(learner, stream, task, cfg, report)?;
        log::info!(
            "after task {task}: TIL {:?} CIL {:?}",
            report.til.last().unwrap(),
            report.cil.last().unwrap()
        );
        on_task_end(task, learner, report)?;
    }
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// `task,phase,epoch,loss_total,loss_A,loss_T,loss_R,loss_C,loss_H,loss_D,lr_backbone,lr_head,tau`.
pub fn metrics_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record([
        "task", "phase", "epoch", "loss_total", "loss_A", "loss_T", "loss_R", "loss_C", "loss_H", "loss_D",
        "lr_backbone", "lr_head", "tau",
    ])
    .map_err(csv_err)?;
    for m in report.metrics() {
        w.write_record([
            m.task.to_string(),
            m.phase.name().to_string(),
            m.epoch.to_string(),
            format!("{:e}", m.loss_total),
            format!("{:e}", m.loss_a),
            format!("{:e}", m.loss_t),
            opt_cell(m.loss_r),
            opt_cell(m.loss_c),
            opt_cell(m.loss_h),
            opt_cell(m.loss_d),
            format!("{:e}", m.lr_backbone),
            opt_cell(m.lr_head),
            format!("{:e}", m.tau),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))
}

/// `task,vs_first,vs_previous`; tasks are 1-based and `vs_previous` is empty at task 1.
pub fn drift_csv(report: &RunReport) -> Result<Vec<u8>> {
    let first = eval::drift_vs_first(&report.probe, None);
    let prev = eval::drift_vs_previous(&report.probe, None);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(["task", "vs_first", "vs_previous"]).map_err(csv_err)?;
    for (t, f) in first.iter().enumerate() {
        let p = if t == 0 { String::new() } else { format!("{:e}", prev[t - 1]) };
        w.write_record([(t + 1).to_string(), format!("{f:e}"), p]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))
}

/// Per-epoch wall-clock seconds, kept apart from the metrics so those stay reproducible.
pub fn timing_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(["task", "phase", "epoch", "wall_seconds"]).map_err(csv_err)?;
    for m in report.metrics() {
        w.write_record([m.task.to_string(), m.phase.name().into(), m.epoch.to_string(), format!("{:.6}", m.wall_seconds)])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))
}
