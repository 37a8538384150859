//! Scalar loop implementations of every loss, and random-instance sweeps
//! comparing them with the tensor versions.

use cipnet::losses::{
    loss_align, loss_classification, loss_decorrelation, loss_hoyer, loss_stability, loss_tanh_filtered, StabilityTerm,
};
use cipnet::model::head_scores;
use cipnet_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-10;
pub const INSTANCES: usize = 100;
const LOG_GUARD: f64 = 1e-12;

pub fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random channel-softmaxed map `[b, d, hw]`, flattened.
fn softmaxed(rng: &mut ChaCha8Rng, b: usize, d: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * d * hw];
    for i in 0..b {
        for j in 0..hw {
            let logits: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..d {
                out[(i * d + c) * hw + j] = logits[c].exp() / z;
            }
        }
    }
    out
}

fn subset(rng: &mut ChaCha8Rng, d: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.5)).collect();
    if s.is_empty() {
        s.push(rng.random_range(0..d));
    }
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|got - want|`, relative once `|want| > 1`.
fn err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

pub fn oracle_align(z1: &[f64], z2: &[f64], b: usize, d: usize, hw: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..b {
        for j in 0..hw {
            let (mut d1, mut d2) = (0.0, 0.0);
            for c in 0..d {
                let k = (i * d + c) * hw + j;
                let m = 0.5 * (z1[k] + z2[k]);
                d1 += z1[k] * m;
                d2 += z2[k] * m;
            }
            acc += (d1 * d2).max(LOG_GUARD).ln();
        }
    }
    -acc / (2.0 * (b * hw) as f64)
}

pub fn oracle_tanh(p: &[f64], b: usize, d: usize, rare: &[usize], eps: f64) -> f64 {
    let mut acc = 0.0;
    for &k in rare {
        let s: f64 = (0..b).map(|i| p[i * d + k]).sum();
        acc += (s.tanh() + eps).max(LOG_GUARD).ln();
    }
    -acc / rare.len() as f64
}

/// Each term: (important prototypes, importance per prototype, frozen `[b, d]`).
pub fn oracle_stability(p: &[f64], b: usize, d: usize, terms: &[(Vec<usize>, Vec<f64>, Vec<f64>)]) -> f64 {
    let mut total = 0.0;
    for (important, imp, frozen) in terms {
        if important.is_empty() {
            continue;
        }
        let mut part = 0.0;
        for &k in important {
            let sq: f64 = (0..b).map(|i| (p[i * d + k] - frozen[i * d + k]).powi(2)).sum();
            part += imp[k] * sq.sqrt();
        }
        total += part / important.len() as f64;
    }
    total
}

pub fn oracle_classification(s: &[f64], b: usize, k: usize, labels: &[usize]) -> f64 {
    let mut acc = 0.0;
    for i in 0..b {
        let row = &s[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        acc += lse - row[labels[i]];
    }
    acc / b as f64
}

pub fn oracle_hoyer(w: &[f64], c: usize, d: usize, eps: f64) -> f64 {
    let root = (d as f64).sqrt();
    let mut acc = 0.0;
    for r in 0..c {
        let row = &w[r * d..(r + 1) * d];
        let l1: f64 = row.iter().map(|v| v.abs()).sum();
        let l2: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += (root - l1 / (l2 + eps)) / (root - 1.0);
    }
    1.0 - acc / c as f64
}

/// `previous`: (rows, `[rows, d]` weights) of each frozen head.
pub fn oracle_decorrelation(previous: &[(usize, Vec<f64>)], current: &[f64], c: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for (rows, w) in previous {
        for i in 0..*rows {
            for j in 0..c {
                total += dot(&w[i * d..(i + 1) * d], &current[j * d..(j + 1) * d]).powi(2);
            }
        }
    }
    for i in 0..c {
        for j in 0..c {
            if i != j {
                total += dot(&current[i * d..(i + 1) * d], &current[j * d..(j + 1) * d]).powi(2);
            }
        }
    }
    total
}

pub fn sweep_align(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (b, d, h, w) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(1..4), rng.random_range(1..4));
        let z1 = softmaxed(&mut rng, b, d, h * w);
        let z2 = softmaxed(&mut rng, b, d, h * w);
        let tape = Tape::new();
        let got = loss_align(tape.constant(t(&[b, d, h, w], &z1)), tape.constant(t(&[b, d, h, w], &z2)))
            .unwrap()
            .item()
            .unwrap();
        worst = worst.max(err(got, oracle_align(&z1, &z2, b, d, h * w)));
    }
    worst
}

pub fn sweep_tanh(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (b, d) = (rng.random_range(1..6), rng.random_range(1..9));
        let p = uniform(&mut rng, b * d, 0.0, 0.6);
        let rare = subset(&mut rng, d);
        let tape = Tape::new();
        let got = loss_tanh_filtered(tape.constant(t(&[b, d], &p)), &rare, 1e-7).unwrap().item().unwrap();
        worst = worst.max(err(got, oracle_tanh(&p, b, d, &rare, 1e-7)));
    }
    worst
}

pub fn sweep_stability(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (b, d, tasks) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..4));
        let p = uniform(&mut rng, b * d, 0.0, 1.0);
        let raw: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = (0..tasks)
            .map(|_| (subset(&mut rng, d), uniform(&mut rng, d, 0.0, 2.0), uniform(&mut rng, b * d, 0.0, 1.0)))
            .collect();
        let terms: Vec<StabilityTerm<f64>> = raw
            .iter()
            .map(|(important, importance, frozen)| StabilityTerm {
                important: important.clone(),
                importance: importance.clone(),
                frozen: t(&[b, d], frozen),
            })
            .collect();
        let tape = Tape::new();
        let got = loss_stability(tape.constant(t(&[b, d], &p)), &terms).unwrap().item().unwrap();
        worst = worst.max(err(got, oracle_stability(&p, b, d, &raw)));
    }
    worst
}

pub fn sweep_classification(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (b, k) = (rng.random_range(1..6), rng.random_range(2..9));
        let s = uniform(&mut rng, b * k, -5.0, 5.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let tape = Tape::new();
        let got = loss_classification(tape.constant(t(&[b, k], &s)), &labels).unwrap().item().unwrap();
        worst = worst.max(err(got, oracle_classification(&s, b, k, &labels)));
    }
    worst
}

pub fn sweep_hoyer(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (c, d) = (rng.random_range(1..5), rng.random_range(2..9));
        let w = uniform(&mut rng, c * d, 0.0, 2.0);
        let tape = Tape::new();
        let got = loss_hoyer(tape.constant(t(&[c, d], &w)), 1e-6).unwrap().item().unwrap();
        worst = worst.max(err(got, oracle_hoyer(&w, c, d, 1e-6)));
    }
    worst
}

pub fn sweep_decorrelation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (c, d, heads) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(0..3));
        let previous: Vec<(usize, Vec<f64>)> = (0..heads)
            .map(|_| {
                let rows = rng.random_range(1..5);
                (rows, uniform(&mut rng, rows * d, 0.0, 1.5))
            })
            .collect();
        let current = uniform(&mut rng, c * d, 0.0, 1.5);
        let tape = Tape::new();
        let prev_vars: Vec<_> = previous.iter().map(|(r, w)| tape.constant(t(&[*r, d], w))).collect();
        let got = loss_decorrelation(&prev_vars, tape.constant(t(&[c, d], &current))).unwrap().item().unwrap();
        worst = worst.max(err(got, oracle_decorrelation(&previous, &current, c, d)));
    }
    worst
}

pub fn sweep_scores(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (b, c, d) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..7));
        let p = uniform(&mut rng, b * d, 0.01, 1.0);
        let w = uniform(&mut rng, c * d, 0.01, 2.0);
        let tau = rng.random_range(0.1..20.0);
        let tape = Tape::new();
        let s = head_scores(tape.constant(t(&[b, d], &p)), tape.constant(t(&[c, d], &w)), tape.scalar(tau))
            .unwrap()
            .value();
        for r in 0..b {
            for k in 0..c {
                let (pr, wk) = (&p[r * d..(r + 1) * d], &w[k * d..(k + 1) * d]);
                let want = tau * dot(pr, wk) / (dot(pr, pr).sqrt() * dot(wk, wk).sqrt());
                worst = worst.max(err(s.data()[r * c + k], want));
            }
        }
    }
    worst
}

/// The six losses by name with the worst error over their sweep.
pub fn all_loss_sweeps() -> Vec<(&'static str, f64)> {
    vec![
        ("L_A", sweep_align(1)),
        ("L_T", sweep_tanh(2)),
        ("L_R", sweep_stability(3)),
        ("L_C", sweep_classification(4)),
        ("L_H", sweep_hoyer(5)),
        ("L_D", sweep_decorrelation(6)),
    ]
}

/// Hand anchors as (name, computed, expected, tolerance).
pub fn anchors() -> Vec<(&'static str, f64, f64, f64)> {
    let tape = Tape::new();
    let z = tape.constant(Tensor::full(&[2, 2, 3, 3], 0.5));
    let align = loss_align(z, z).unwrap().item().unwrap();
    // eps_h = 0 up to the smallest positive double, so the value is exact.
    let w = tape.constant(t(&[1, 4], &[1.0, 1.0, 0.0, 0.0]));
    let hoyer = loss_hoyer(w, f64::MIN_POSITIVE).unwrap().item().unwrap();
    let p = tape.constant(t(&[2, 1], &[1.0, 0.0]));
    let term = StabilityTerm {
        important: vec![0],
        importance: vec![0.5],
        frozen: t(&[2, 1], &[0.0, 1.0]),
    };
    let stability = loss_stability(p, &[term]).unwrap().item().unwrap();
    vec![
        ("L_A uniform views", align, std::f64::consts::LN_2, 1e-15),
        ("L_H [1,1,0,0]", hoyer, 2f64.sqrt() - 1.0, 1e-15),
        ("L_R single prototype", stability, 0.5 * 2f64.sqrt(), 1e-15),
    ]
}
