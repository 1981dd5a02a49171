use super::{Real, Tensor};
use crate::error::{PalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Tensor<F>], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&[F], &[F]) {
        (&self.m[i], &self.v[i])
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Parameters that do
/// not require gradients are never touched; a missing gradient counts as
/// zero.
pub fn adam_step<F: Real>(params: &[Tensor<F>], state: &mut AdamState<F>, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(PalError::Contract(format!(
            "adam: state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(PalError::Contract(format!(
                "adam: parameter {i} has {} elements, moments have {}",
                p.numel(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let bc1 = F::of(1.0 - c.beta1.powi(state.step as i32));
    let bc2 = F::of(1.0 - c.beta2.powi(state.step as i32));
    let (lr, eps) = (F::of(lr), F::of(c.eps));
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad_ref();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(F::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (F::one() - b1) * g;
            v[j] = b2 * v[j] + (F::one() - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(params: &[Tensor<F>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.iter().filter(|p| p.requires_grad()) {
        if let Some(g) = p.grad_ref().as_ref() {
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for p in params {
            if let Some(g) = p.0.grad.borrow_mut().as_mut() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}
