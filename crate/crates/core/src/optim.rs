//! Adam with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, OptimizerState, ParamStore};
use crate::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Fraction of the run spent ramping up linearly from zero.
    pub warmup_fraction: f64,
    /// Floor of the cosine, as a fraction of `base_lr`.
    pub final_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 1e-3, warmup_fraction: 0.05, final_fraction: 0.0 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0)
            || !(0.0..1.0).contains(&self.warmup_fraction)
            || !(0.0..=1.0).contains(&self.final_fraction)
        {
            return Err(Error::InvalidConfig(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    /// Rate for 0-based `step` of a `total`-step run.
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1) as f64;
        let s = step as f64;
        let warm = (self.warmup_fraction * total).ceil();
        if s < warm {
            return self.base_lr * (s + 1.0) / warm;
        }
        let span = (total - warm).max(1.0);
        let t = ((s - warm) / span).min(1.0);
        let floor = self.final_fraction * self.base_lr;
        floor + 0.5 * (self.base_lr - floor) * (1.0 + (core::f64::consts::PI * t).cos())
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        Adam { cfg, state: OptimizerState { step: 0, m: params.zeros_like(), v: params.zeros_like() } }
    }

    pub fn with_state(cfg: AdamConfig, state: OptimizerState) -> Self {
        Adam { cfg, state }
    }

    /// One update of every tensor with `trainable[k]` set. Parameters and
    /// moments are rounded to float32 afterwards so checkpoints are exact.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64, trainable: &[bool]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let tensors = params.tensors_mut();
        for k in 0..tensors.len() {
            if !trainable[k] {
                continue;
            }
            let g = &grads.tensors()[k].data;
            let m = &mut self.state.m.tensors_mut()[k].data;
            let v = &mut self.state.v.tensors_mut()[k].data;
            let p = &mut tensors[k].data;
            for i in 0..p.len() {
                m[i] = (b1 * m[i] + (1.0 - b1) * g[i]) as f32 as f64;
                v[i] = (b2 * v[i] + (1.0 - b2) * g[i] * g[i]) as f32 as f64;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[i];
                p[i] = (p[i] - lr * update) as f32 as f64;
            }
        }
    }
}
