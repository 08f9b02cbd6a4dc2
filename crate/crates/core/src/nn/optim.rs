use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Real};

/// Linear warm-up to `peak` over `warmup_ratio * total_steps`, then linear
/// decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_ratio * total).max(1.0);
        let s = step as f64 + 1.0;
        if s <= warm {
            self.peak * s / warm
        } else {
            self.peak * ((total - s + 1.0) / (total - warm + 1.0)).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// Adam with decoupled weight decay. Decay skips biases and norm gains
/// (parameters whose names end in `.b` or `.g`).
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    /// Number of updates applied so far.
    pub step: usize,
    decays: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(ps: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || ps.iter().map(|(_, v)| Array2::zeros(v.raw_dim())).collect::<Vec<_>>();
        let decays = ps.iter().map(|(name, _)| !(name.ends_with(".b") || name.ends_with(".g"))).collect();
        Self { config, m: zeros(), v: zeros(), step: 0, decays }
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn update(&mut self, ps: &mut ParamStore<T>, grads: &mut Grads<T>, lr: f64) -> f64 {
        let c = self.config;
        let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
        if c.clip_norm > 0.0 && norm > c.clip_norm {
            grads.scale(T::of(c.clip_norm / norm));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let lr_t = T::of(lr);
        for (i, (_, p)) in ps.iter_mut().enumerate() {
            let wd = if self.decays[i] { T::of(lr * c.weight_decay) } else { T::zero() };
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads.values()[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr_t * mhat / (vhat.sqrt() + eps) - wd * *p;
                });
        }
        norm
    }
}
