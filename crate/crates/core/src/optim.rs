//! Learning-rate schedule and the AdamW optimizer.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{config_err, Error, Result};
use crate::numcore::{ParamGrads, ParamStore, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Classification fine-tuning recipe: AdamW at 5e-4 with 10 warmup
    /// epochs from 1e-6, cosine down to 1e-6 over 300 epochs, wd 0.05,
    /// batch 32.
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup_lr: 1e-6,
            min_lr: 1e-6,
            warmup_epochs: 10,
            epochs: 300,
            weight_decay: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if !(self.lr > 0.0 && self.warmup_lr > 0.0 && self.min_lr > 0.0) {
            return Err(config_err!("learning rates must be positive"));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(config_err!("weight_decay must be non-negative and batch_size positive"));
        }
        Ok(())
    }
}

/// Linear warmup `warmup_lr → lr`, then half-cosine `lr → min_lr`.
///
/// `epoch` may be fractional; `epoch == epochs` gives exactly `min_lr`.
pub fn cosine_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs as f64;
    if epoch < w {
        return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * epoch / w;
    }
    let span = (cfg.epochs as f64 - w).max(1.0);
    let t = ((epoch - w) / span).clamp(0.0, 1.0);
    cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + Float::cos(core::f64::consts::PI * t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = |_| Vec::new();
        AdamW {
            cfg,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with decoupled decay:
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
    ///
    /// Frozen tensors and tensors without a gradient are left untouched.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(alloc::format!(
                "optimizer tracks {} tensors, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - Float::powi(c.beta1, self.step as i32);
        let bc2 = 1.0 - Float::powi(c.beta2, self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape("adamw", p.tensor.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if m.is_empty() {
                m.resize(g.numel(), 0.0);
                v.resize(g.numel(), 0.0);
            }
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let wv = w.as_f64();
                *w = T::of(wv - lr * c.weight_decay * wv - lr * mhat / (Float::sqrt(vhat) + c.eps));
            }
        }
        Ok(())
    }
}
