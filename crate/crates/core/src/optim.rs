//! AdamW and per-epoch learning-rate schedules.

use cipnet_tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One AdamW update with decoupled weight decay.
    pub fn update(&mut self, param: &mut [T], grad: &[T], lr: f64, hp: &AdamHyper) {
        assert_eq!(param.len(), grad.len());
        assert_eq!(param.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
        let c1 = T::one() - T::of(hp.beta1.powi(self.step as i32));
        let c2 = T::one() - T::of(hp.beta2.powi(self.step as i32));
        let (lr, eps, decay) = (T::of(lr), T::of(hp.eps), T::of(hp.weight_decay));
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            param[i] = param[i] - lr * decay * param[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    /// Cosine annealing restarted `cycles` times over the run.
    CosineRestarts { cycles: usize },
}

/// Learning rates never fall below this fraction of the base rate.
pub const LR_FLOOR: f64 = 1e-6;

fn cosine(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let floor = LR_FLOOR * base;
    let frac = epoch.min(total - 1) as f64 / (total - 1) as f64;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rate for 0-based `epoch` out of `total`.
pub fn lr_schedule(kind: Schedule, base: f64, epoch: usize, total: usize) -> f64 {
    match kind {
        Schedule::Cosine => cosine(base, epoch, total),
        Schedule::CosineRestarts { cycles } => {
            let len = total.div_ceil(cycles.max(1)).max(1);
            let start = (epoch / len) * len;
            cosine(base, epoch - start, len.min(total - start))
        }
    }
}
