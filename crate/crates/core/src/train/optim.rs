use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }
}

/// One AdamW update at `step` (1-based) with decoupled weight decay:
/// `θ ← θ − lr (m̂ / (√v̂ + eps) + wd θ)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
    lr: f64,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("optimizer steps are 1-based".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (theta, &grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let grad = grad.as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * grad;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * grad * grad;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps) + cfg.weight_decay * theta.as_f64();
            *theta = T::from_f64(theta.as_f64() - lr * update);
        }
    }
    Ok(())
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear warmup, then the base rate.
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to zero at `total` steps.
    Cosine,
}

/// Learning rate at 1-based `step`: rises linearly from 0 to `base` over
/// `warmup` steps.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize, kind: ScheduleKind) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    match kind {
        ScheduleKind::Constant => base,
        ScheduleKind::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
