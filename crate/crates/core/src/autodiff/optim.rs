use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar};
use crate::error::{Result, WmError};

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<F = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<F>) -> Self {
        let zeros = |p: &ParamSet<F>| p.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect();
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the parameters' gradient buffers (absent buffers count
    /// as zero). A non-finite gradient rejects the whole step.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        if params.len() != self.m.len()
            || params.tensors().iter().zip(&self.m).any(|(t, m)| t.numel() != m.len())
        {
            return Err(WmError::shape("adamw_step", "parameter set does not match optimizer state"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(WmError::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(WmError::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let grad = tensor.grad().map(<[F]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j].f64());
                let mj = b1 * m[j].f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].f64() + (1.0 - b2) * g * g;
                m[j] = F::of(mj);
                v[j] = F::of(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let p = data[j].f64();
                data[j] = F::of(p - self.lr * self.weight_decay * p - self.lr * update);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = F::of(v.f64() * s));
        }
    }
    norm
}

/// Same as [`clip_grad_norm`] but on a parameter set's grad buffers.
pub fn clip_param_grads<F: Scalar>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let mut grads = params.grads_or_zero();
    let norm = clip_grad_norm(&mut grads, max_norm);
    for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
        t.set_grad(g).expect("same layout");
    }
    norm
}

pub fn global_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

/// Linear warmup over the first `warmup_frac` of steps, then cosine decay to 0.
pub fn cosine_lr(step: usize, total: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return max_lr;
    }
    let warmup = ((total as f64) * warmup_frac).ceil() as usize;
    if step < warmup {
        return max_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
