//! Central finite-difference verification of tape adjoints.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst entry found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input position, flat element index)` of the worst entry.
    pub worst: (usize, usize),
}

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare the adjoint of a scalar function against central differences.
///
/// The error for an entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = out.backward()?;
        vars.iter()
            .map(|v| grads.get(v).cloned().expect("every input is a parameter"))
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars)?.item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    for (pos, grad) in analytic.iter().enumerate() {
        for idx in 0..inputs[pos].numel() {
            let orig = inputs[pos].data()[idx];
            work[pos].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[pos].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[pos].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheck {
                    max_rel_error: err,
                    worst: (pos, idx),
                };
            }
        }
    }
    Ok(report)
}
