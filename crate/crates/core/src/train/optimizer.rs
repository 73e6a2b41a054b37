use crate::error::{LsdError, Result};
use crate::model::{is_weight, ParamSet};
use crate::real::Real;

use super::schedule::{interpolate, ScheduleShape};

/// Adam with gradient clipping, weight noise and L2 decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_shape: ScheduleShape,
    /// Global L2 norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Standard deviation of Gaussian noise added to weights (not biases)
    /// for each example's forward and backward pass.
    pub weight_noise_std: f64,
    pub l2_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_start: 1e-3,
            lr_end: 1e-4,
            lr_shape: ScheduleShape::Linear,
            grad_clip_norm: 1.0,
            weight_noise_std: 0.075,
            l2_decay: 1e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("lr_start", self.lr_start > 0.0),
            ("lr_end", self.lr_end > 0.0),
            ("grad_clip_norm", self.grad_clip_norm >= 0.0),
            ("weight_noise_std", self.weight_noise_std >= 0.0),
            ("l2_decay", self.l2_decay >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(LsdError::config(format!("optimizer {name} out of range")));
            }
        }
        Ok(())
    }

    /// Learning rate at a zero-based step of a run of `total_steps`.
    pub fn learning_rate(&self, step: u64, total_steps: u64) -> f64 {
        let span = total_steps.saturating_sub(1).max(1);
        interpolate(self.lr_start, self.lr_end, step as f64 / span as f64, self.lr_shape)
    }
}

/// Scales `grads` so its global norm is at most `max_norm` and returns the
/// norm before clipping. `max_norm <= 0` leaves the gradient untouched.
pub fn clip_global_norm<F: Real>(grads: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = grads.norm().to_f64_lossy();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(F::lit(max_norm / norm));
    }
    norm
}

/// Adds `decay * theta` to the gradient of every weight tensor.
pub fn add_l2<F: Real>(grads: &mut ParamSet<F>, params: &ParamSet<F>, decay: f64) {
    if decay == 0.0 {
        return;
    }
    let d = F::lit(decay);
    for (i, name) in params.names().iter().enumerate() {
        if !is_weight(name) {
            continue;
        }
        let p = &params.get(i).data;
        for (g, &w) in grads.get_mut(i).data.iter_mut().zip(p) {
            *g += d * w;
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    m: ParamSet<F>,
    v: ParamSet<F>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params` against descent gradient `grads`.
    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>, lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
        let one = F::one();
        let c1 = F::lit(1.0 - cfg.beta1.powf(self.t as f64));
        let c2 = F::lit(1.0 - cfg.beta2.powf(self.t as f64));
        let lr = F::lit(lr);
        let eps = F::lit(cfg.adam_eps);
        for i in 0..params.tensors().len() {
            let g = &grads.get(i).data;
            let m = &mut self.m.get_mut(i).data;
            let v = &mut self.v.get_mut(i).data;
            let p = &mut params.get_mut(i).data;
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
