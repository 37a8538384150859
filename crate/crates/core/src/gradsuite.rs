//! Finite-difference suite over every tensor primitive and every loss term.
//!
//! Primitives are checked on random inputs; loss terms are checked end to
//! end, differentiating through a tiny backbone, the prototype layer and the
//! heads. Everything runs in `f64`.

use cipnet_tensor::{concat, grad_check, Result as TensorResult, Tape, Tensor, Var, DEFAULT_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, StabilityTerm};
use crate::model::{BackboneConfig, BoundModel, ConvSpec};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const LOSS_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Primitive,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: CheckKind,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            CheckKind::Primitive => PRIMITIVE_TOL,
            CheckKind::Loss => LOSS_TOL,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance()
    }
}

type Unary = for<'t> fn(Var<'t, f64>) -> TensorResult<Var<'t, f64>>;
type Binary = for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> TensorResult<Var<'t, f64>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Magnitudes in [0.2, 1) with random sign, away from kinks at zero.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contract with fixed random weights so every output entry gets a distinct adjoint.
fn weighted_sum<'t>(out: Var<'t, f64>, seed: u64) -> TensorResult<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(out.tape().constant(w))?.sum()
}

fn worst(reports: impl IntoIterator<Item = TensorResult<f64>>) -> Result<f64> {
    let mut m = 0.0f64;
    for r in reports {
        let e = r?;
        m = if e.is_nan() { f64::NAN } else { m.max(e) };
    }
    Ok(m)
}

fn primitives(seed: u64) -> Result<Vec<SuiteEntry>> {
    #[derive(Clone, Copy)]
    enum Init {
        Signed,
        Away,
        Positive,
    }
    let make = |init: Init, rng: &mut ChaCha8Rng, shape: &[usize]| match init {
        Init::Signed => uniform(rng, shape, -1.0, 1.0),
        Init::Away => signed_away(rng, shape),
        Init::Positive => uniform(rng, shape, 0.3, 2.0),
    };
    let unary: Vec<(&str, Init, Vec<usize>, Unary)> = vec![
        ("log", Init::Positive, vec![3, 4], |v| v.log()),
        ("exp", Init::Signed, vec![3, 4], |v| v.exp()),
        ("tanh", Init::Signed, vec![3, 4], |v| v.tanh()),
        ("sqrt", Init::Positive, vec![3, 4], |v| v.sqrt()),
        ("abs", Init::Away, vec![3, 4], |v| v.abs()),
        ("relu", Init::Away, vec![3, 4], |v| v.relu()),
        ("clamp_min", Init::Away, vec![3, 4], |v| v.clamp_min(0.05)),
        ("neg", Init::Signed, vec![5], |v| v.neg()),
        ("add_scalar", Init::Signed, vec![5], |v| v.add_scalar(2.5)),
        ("mul_scalar", Init::Signed, vec![5], |v| v.mul_scalar(-1.5)),
        ("transpose", Init::Signed, vec![3, 4], |v| v.transpose()),
        ("reshape", Init::Signed, vec![2, 6], |v| v.reshape(&[3, 4])),
        ("broadcast_to", Init::Signed, vec![2, 1, 3], |v| v.broadcast_to(&[2, 4, 3])),
        ("sum_axis", Init::Signed, vec![3, 4, 2], |v| v.sum_axis(1)),
        ("mean_axis", Init::Signed, vec![3, 4, 2], |v| v.mean_axis(2)),
        ("sum", Init::Signed, vec![3, 4], |v| v.sum()),
        ("mean", Init::Signed, vec![3, 4], |v| v.mean()),
        ("max_axis", Init::Signed, vec![3, 5, 2], |v| Ok(v.max_axis(1)?.0)),
        ("norm_l1", Init::Away, vec![3, 4], |v| v.norm_l1(1)),
        ("norm_l2", Init::Signed, vec![3, 4], |v| v.norm_l2(0)),
        ("select", Init::Signed, vec![3, 5], |v| v.select(1, &[4, 0, 4])),
        ("log_softmax", Init::Signed, vec![3, 5], |v| v.log_softmax()),
        ("channel_softmax", Init::Signed, vec![2, 4, 3, 3], |v| v.channel_softmax()),
        ("spatial_max", Init::Signed, vec![2, 3, 3, 4], |v| v.spatial_max()),
    ];
    let binary: Vec<(&str, [Vec<usize>; 2], Binary)> = vec![
        ("add", [vec![3, 4], vec![3, 4]], |a, b| a.add(b)),
        ("sub", [vec![3, 4], vec![3, 4]], |a, b| a.sub(b)),
        ("mul", [vec![3, 4], vec![3, 4]], |a, b| a.mul(b)),
        ("div", [vec![3, 4], vec![3, 4]], |a, b| a.div(b)),
        ("matmul", [vec![3, 4], vec![4, 2]], |a, b| a.matmul(b)),
        ("concat", [vec![2, 3], vec![2, 1]], |a, b| concat(&[a, b, a], 1)),
        ("add_channel_bias", [vec![2, 3, 2, 2], vec![3]], |a, b| a.add_channel_bias(b)),
        ("conv2d", [vec![2, 2, 5, 5], vec![3, 2, 3, 3]], |a, b| a.conv2d(b, 2, 1)),
    ];

    let mut out = Vec::new();
    for (name, init, shape, op) in unary {
        let e = worst((0..3).map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k));
            let x = make(init, &mut rng, &shape);
            grad_check(|_, v| weighted_sum(op(v[0])?, 99), &[x], DEFAULT_EPS).map(|r| r.max_rel_error)
        }))?;
        out.push(SuiteEntry {
            name: name.to_string(),
            kind: CheckKind::Primitive,
            max_rel_error: e,
        });
    }
    for (name, [sa, sb], op) in binary {
        let e = worst((0..3).map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k));
            let a = uniform(&mut rng, &sa, -1.0, 1.0);
            // Positive second operand keeps `div` away from its pole.
            let b = uniform(&mut rng, &sb, 0.3, 2.0);
            grad_check(|_, v| weighted_sum(op(v[0], v[1])?, 5), &[a, b], DEFAULT_EPS).map(|r| r.max_rel_error)
        }))?;
        out.push(SuiteEntry {
            name: name.to_string(),
            kind: CheckKind::Primitive,
            max_rel_error: e,
        });
    }
    Ok(out)
}

/// A tiny two-view batch and model: 8x8 images, one hidden stage, D = 4, a
/// frozen two-class head and a trainable two-class head.
struct Fixture {
    config: BackboneConfig,
    views: Tensor<f64>,
    labels: Vec<usize>,
    frozen_head: Tensor<f64>,
    frozen_presence: Tensor<f64>,
    params: Vec<Tensor<f64>>,
    importance: Vec<f64>,
}

const BATCH: usize = 2;
const D: usize = 4;

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = BackboneConfig {
            in_channels: 3,
            image_size: 8,
            layers: vec![
                ConvSpec {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    relu: true,
                },
                ConvSpec {
                    out_channels: D,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    relu: false,
                },
            ],
        };
        let views = uniform(&mut rng, &[2 * BATCH, 3, 8, 8], 0.0, 1.0);
        let mut params = Vec::new();
        let mut c_in = 3;
        for l in &config.layers {
            params.push(uniform(&mut rng, &[l.out_channels, c_in, l.kernel, l.kernel], -0.8, 0.8));
            params.push(uniform(&mut rng, &[l.out_channels], -0.2, 0.2));
            c_in = l.out_channels;
        }
        params.push(uniform(&mut rng, &[2, D], 0.2, 1.5));
        params.push(Tensor::scalar(rng.random_range(-0.3..0.3)));
        Self {
            frozen_head: uniform(&mut rng, &[2, D], 0.2, 1.5),
            frozen_presence: uniform(&mut rng, &[2 * BATCH, D], 0.0, 1.0),
            importance: (0..D).map(|_| rng.random_range(0.1..1.5)).collect(),
            labels: vec![2, 3, 0, 3, 2, 3, 0, 3][..2 * BATCH].to_vec(),
            config,
            views,
            params,
        }
    }

    fn bind<'t>(&self, tape: &'t Tape<f64>, v: &[Var<'t, f64>]) -> TensorResult<BoundModel<'t, f64>> {
        let n = self.config.layers.len();
        let layers = (0..n).map(|i| (v[2 * i], v[2 * i + 1])).collect();
        let heads = vec![tape.constant(self.frozen_head.clone()), v[2 * n]];
        BoundModel::from_vars(&self.config, layers, heads, v[2 * n + 1]).map_err(to_tensor_error)
    }

    fn stability(&self) -> Vec<StabilityTerm<f64>> {
        vec![StabilityTerm {
            important: vec![0, 2],
            importance: self.importance.clone(),
            frozen: self.frozen_presence.clone(),
        }]
    }
}

fn to_tensor_error(e: Error) -> cipnet_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => cipnet_tensor::TensorError::dim("gradsuite", "-", other.to_string()),
    }
}

#[derive(Clone, Copy)]
enum LossCase {
    Align,
    Tanh,
    Stability,
    Classification,
    Hoyer,
    Decorrelation,
    Pretrain,
    Total,
}

fn loss_value<'t>(fx: &Fixture, case: LossCase, tape: &'t Tape<f64>, v: &[Var<'t, f64>]) -> TensorResult<Var<'t, f64>> {
    let w = LossWeights::default();
    let model = fx.bind(tape, v)?;
    let f = model.features(tape.constant(fx.views.clone())).map_err(to_tensor_error)?;
    let first: Vec<usize> = (0..BATCH).collect();
    let second: Vec<usize> = (BATCH..2 * BATCH).collect();
    let rare = [1, 3];
    let lift = |r: Result<Var<'t, f64>>| r.map_err(to_tensor_error);
    let align = || lift(losses::loss_align(f.zsoft.select(0, &first)?, f.zsoft.select(0, &second)?));
    let tanh = || lift(losses::loss_tanh_filtered(f.presence, &rare, w.eps_t));
    let stab = || lift(losses::loss_stability(f.presence, &fx.stability()));
    let classification = || lift(losses::loss_classification(model.all_scores(f.presence).map_err(to_tensor_error)?, &fx.labels));
    let hoyer = || lift(losses::loss_hoyer(model.heads[1], w.eps_h));
    let decor = || lift(losses::loss_decorrelation(&model.heads[..1], model.heads[1]));
    match case {
        LossCase::Align => align(),
        LossCase::Tanh => tanh(),
        LossCase::Stability => stab(),
        LossCase::Classification => classification(),
        LossCase::Hoyer => hoyer(),
        LossCase::Decorrelation => decor(),
        LossCase::Pretrain => lift(losses::loss_pretrain(&w, 0.6, align()?, tanh()?, Some(stab()?))),
        LossCase::Total => {
            let terms = LossTerms {
                align: align()?,
                tanh: tanh()?,
                stability: Some(stab()?),
                classification: Some(classification()?),
                hoyer: Some(hoyer()?),
                decorrelation: Some(decor()?),
            };
            lift(losses::loss_total(&w, &terms))
        }
    }
}

fn loss_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let cases = [
        ("loss_A", LossCase::Align),
        ("loss_T", LossCase::Tanh),
        ("loss_R", LossCase::Stability),
        ("loss_C", LossCase::Classification),
        ("loss_H", LossCase::Hoyer),
        ("loss_D", LossCase::Decorrelation),
        ("loss_pre", LossCase::Pretrain),
        ("loss_total", LossCase::Total),
    ];
    let fixtures: Vec<Fixture> = (0..2).map(|k| Fixture::new(seed.wrapping_mul(31).wrapping_add(k))).collect();
    let mut out = Vec::new();
    for (name, case) in cases {
        let e = worst(fixtures.iter().map(|fx| {
            grad_check(|tape, v| loss_value(fx, case, tape, v), &fx.params, DEFAULT_EPS).map(|r| r.max_rel_error)
        }))?;
        out.push(SuiteEntry {
            name: name.to_string(),
            kind: CheckKind::Loss,
            max_rel_error: e,
        });
    }
    Ok(out)
}

/// Run every check. Entries are returned even when they fail; callers decide.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = primitives(seed)?;
    out.extend(loss_checks(seed)?);
    Ok(out)
}
