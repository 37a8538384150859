//! Training objectives. Every function records onto the caller's tape and
//! returns a scalar [`Var`].

use cipnet_tensor::{Scalar, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied before `log` inside loss code.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Alignment weight during the training phase; pretraining ramps 0 -> 1.
    pub lambda_a: f64,
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_h: f64,
    pub lambda_d: f64,
    pub eps_t: f64,
    pub eps_h: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_a: 5.0,
            lambda_t: 1.0,
            lambda_r: 8.0,
            lambda_c: 2.0,
            lambda_h: 10.0,
            lambda_d: 0.005,
            eps_t: 1e-7,
            eps_h: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_a", self.lambda_a),
            ("lambda_t", self.lambda_t),
            ("lambda_r", self.lambda_r),
            ("lambda_c", self.lambda_c),
            ("lambda_h", self.lambda_h),
            ("lambda_d", self.lambda_d),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.eps_t > 0.0 && self.eps_h > 0.0) {
            return Err(Error::Config("eps_t and eps_h must be positive".into()));
        }
        Ok(())
    }
}

fn guarded_log<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.clamp_min(LOG_GUARD)?.log()?)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(op, "all", format!("{:?} vs {:?}", a.shape(), b.shape())).into());
    }
    Ok(())
}

/// Midpoint alignment of two softmaxed views, both `[B, D, H, W]`.
pub fn loss_align<'t, T: Scalar>(z1: Var<'t, T>, z2: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("loss_align", &z1, &z2)?;
    let s = z1.shape();
    if s.len() != 4 {
        return Err(TensorError::dim("loss_align", "rank", format!("expected 4-D, got {s:?}")).into());
    }
    let count = (2 * s[0] * s[2] * s[3]) as f64;
    let mid = z1.add(z2)?.mul_scalar(0.5)?;
    let d1 = z1.mul(mid)?.sum_axis(1)?;
    let d2 = z2.mul(mid)?.sum_axis(1)?;
    Ok(guarded_log(d1.mul(d2)?)?.sum()?.mul_scalar(-1.0 / count)?)
}

/// Uniformity term over the prototypes in `rare` only. `p` is `[B, D]`.
pub fn loss_tanh_filtered<'t, T: Scalar>(p: Var<'t, T>, rare: &[usize], eps_t: f64) -> Result<Var<'t, T>> {
    if p.shape().len() != 2 {
        return Err(TensorError::dim("loss_tanh_filtered", "rank", format!("{:?}", p.shape())).into());
    }
    if rare.is_empty() {
        log::debug!("rare prototype set is empty; uniformity term is 0");
        return Ok(p.tape().scalar(T::zero()));
    }
    let pooled = p.select(1, rare)?.sum_axis(0)?.tanh()?.add_scalar(eps_t)?;
    Ok(guarded_log(pooled)?.mean()?.neg()?)
}

/// One past task's share of the stability regulariser.
#[derive(Debug, Clone)]
pub struct StabilityTerm<T> {
    /// Highly used prototypes of that task.
    pub important: Vec<usize>,
    /// `max_c |w_{d,c}|` of that task's head, indexed by prototype.
    pub importance: Vec<f64>,
    /// Presence scores `[B, D]` of the current batch under the frozen model.
    pub frozen: Tensor<T>,
}

/// Importance-weighted L2 drift of presence columns against frozen references.
pub fn loss_stability<'t, T: Scalar>(p: Var<'t, T>, terms: &[StabilityTerm<T>]) -> Result<Var<'t, T>> {
    let tape = p.tape();
    let mut total = tape.scalar(T::zero());
    for term in terms {
        if term.frozen.shape() != p.shape().as_slice() {
            return Err(TensorError::dim(
                "loss_stability",
                "all",
                format!("frozen {:?} vs current {:?}", term.frozen.shape(), p.shape()),
            )
            .into());
        }
        if term.important.is_empty() {
            continue;
        }
        let frozen = tape.constant(term.frozen.clone()).select(1, &term.important)?;
        let drift = p.select(1, &term.important)?.sub(frozen)?.norm_l2(0)?;
        let imp: Vec<f64> = term.important.iter().map(|&d| term.importance[d]).collect();
        let imp = tape.constant(Tensor::from_f64(&[imp.len()], &imp)?);
        let part = drift.mul(imp)?.sum()?.mul_scalar(1.0 / term.important.len() as f64)?;
        total = total.add(part)?;
    }
    Ok(total)
}

/// Mean negative log-likelihood of `labels` under a row softmax of `scores`.
pub fn loss_classification<'t, T: Scalar>(scores: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::dim(
            "loss_classification",
            "0",
            format!("scores {s:?} for {} labels", labels.len()),
        )
        .into());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Range(format!("label {bad} outside {} trained classes", s[1])));
    }
    let mut onehot = Tensor::zeros(&s);
    for (b, &l) in labels.iter().enumerate() {
        onehot.data_mut()[b * s[1] + l] = T::one();
    }
    let picked = scores.log_softmax()?.mul(scores.tape().constant(onehot))?.sum()?;
    Ok(picked.mul_scalar(-1.0 / labels.len() as f64)?)
}

/// One minus the mean row Hoyer sparsity of a `[C, D]` head.
pub fn loss_hoyer<'t, T: Scalar>(w: Var<'t, T>, eps_h: f64) -> Result<Var<'t, T>> {
    let s = w.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(TensorError::dim("loss_hoyer", "1", format!("need [C, D>=2], got {s:?}")).into());
    }
    let root = (s[1] as f64).sqrt();
    let ratio = w.norm_l1(1)?.div(w.norm_l2(1)?.add_scalar(eps_h)?)?;
    let sparsity = ratio.mul_scalar(-1.0 / (root - 1.0))?.add_scalar(root / (root - 1.0))?;
    Ok(sparsity.mean()?.neg()?.add_scalar(1.0)?)
}

/// Squared cross-head weight products. `previous` heads enter as given; bind
/// them without gradients to keep them frozen.
pub fn loss_decorrelation<'t, T: Scalar>(previous: &[Var<'t, T>], current: Var<'t, T>) -> Result<Var<'t, T>> {
    let wt = current.transpose()?;
    let gram = current.matmul(wt)?;
    let row_sq = current.mul(current)?.sum_axis(1)?;
    let mut total = gram.mul(gram)?.sum()?.sub(row_sq.mul(row_sq)?.sum()?)?;
    for &w in previous {
        let cross = w.matmul(wt)?;
        total = total.add(cross.mul(cross)?.sum()?)?;
    }
    Ok(total)
}

/// Evaluated loss terms of one step. Absent terms were not computed.
pub struct LossTerms<'t, T: Scalar> {
    pub align: Var<'t, T>,
    pub tanh: Var<'t, T>,
    pub stability: Option<Var<'t, T>>,
    pub classification: Option<Var<'t, T>>,
    pub hoyer: Option<Var<'t, T>>,
    pub decorrelation: Option<Var<'t, T>>,
}

/// `lambda_a * L_A + lambda_t * L_T + lambda_r * L_R`.
pub fn loss_pretrain<'t, T: Scalar>(
    w: &LossWeights,
    lambda_a: f64,
    align: Var<'t, T>,
    tanh: Var<'t, T>,
    stability: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let mut total = align.mul_scalar(lambda_a)?.add(tanh.mul_scalar(w.lambda_t)?)?;
    if let Some(r) = stability {
        total = total.add(r.mul_scalar(w.lambda_r)?)?;
    }
    Ok(total)
}

/// Pretraining objective at full alignment weight plus the supervised terms.
pub fn loss_total<'t, T: Scalar>(w: &LossWeights, terms: &LossTerms<'t, T>) -> Result<Var<'t, T>> {
    let mut total = loss_pretrain(w, w.lambda_a, terms.align, terms.tanh, terms.stability)?;
    for (term, lambda) in [
        (terms.classification, w.lambda_c),
        (terms.hoyer, w.lambda_h),
        (terms.decorrelation, w.lambda_d),
    ] {
        if let Some(v) = term {
            total = total.add(v.mul_scalar(lambda)?)?;
        }
    }
    Ok(total)
}
