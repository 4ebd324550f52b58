//! AdamW with decoupled weight decay, global-norm clipping and a
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
}

impl AdamW {
    /// `decay_mask[i]` selects parameters subject to weight decay.
    pub fn new(config: AdamWConfig, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        AdamW {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay: decay_mask,
        }
    }

    pub fn update<F: Scalar>(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64().unwrap();
            let mut p = params[i].to_f64().unwrap();
            if self.decay[i] {
                p *= 1.0 - lr * c.weight_decay;
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p -= lr * mhat / (vhat.sqrt() + c.eps);
            params[i] = F::from_f64_lossy(p);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [F], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let g = g.to_f64().unwrap();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64_lossy(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: u64) -> Self {
        LrSchedule {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as u64,
            total_steps,
        }
    }

    /// Learning rate for the update with zero-based index `step`.
    pub fn at(&self, step: u64) -> f64 {
        lr_at(step, self.peak, self.warmup_steps, self.total_steps)
    }
}

/// Linear warmup from zero, then cosine decay to zero at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup.max(1) as f64;
    }
    let progress = (step - warmup) as f64 / total.saturating_sub(warmup).max(1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
