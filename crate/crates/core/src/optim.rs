//! Adam with decoupled weight decay, and the stepwise learning-rate decay
//! schedule.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::model::ParamMap;
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.95,
            beta2: 0.999,
            weight_decay: 5e-7,
            epsilon: 1e-8,
        }
    }
}

/// Stepwise learning-rate schedule: constant until `decay_start_epoch`, then
/// multiplied by `decay_rate` every `decay_step` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    /// Fine-tuning trains the fresh head this many times faster.
    pub head_lr_multiplier: f64,
    pub decay_start_epoch: usize,
    pub decay_rate: f64,
    pub decay_step: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-4,
            head_lr_multiplier: 10.0,
            decay_start_epoch: 10,
            decay_rate: 0.5,
            decay_step: 5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(CoreError::invalid("base_lr must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return Err(CoreError::invalid("decay_rate must lie in (0,1)"));
        }
        if self.decay_step == 0 {
            return Err(CoreError::invalid("decay_step must be at least 1"));
        }
        if self.head_lr_multiplier <= 0.0 {
            return Err(CoreError::invalid("head_lr_multiplier must be positive"));
        }
        Ok(())
    }
}

/// Learning rate for an epoch: `base · rate^k` where `k` counts completed
/// decay intervals (0 before the start epoch, then one more every `step`).
pub fn lr_at_epoch(cfg: &ScheduleConfig, epoch: usize) -> f64 {
    let k = if epoch < cfg.decay_start_epoch {
        0
    } else {
        1 + (epoch - cfg.decay_start_epoch) / cfg.decay_step
    };
    cfg.base_lr * fmath::powf(cfg.decay_rate, k as f64)
}

/// Optimizer state: first/second moments per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub m: ParamMap,
    pub v: ParamMap,
    pub step: u64,
}

impl OptimState {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimState {
            cfg,
            m: ParamMap::new(),
            v: ParamMap::new(),
            step: 0,
        }
    }

    /// One Adam step over every gradient-bearing parameter. Weight decay is
    /// decoupled and applied before the Adam delta. A non-finite gradient
    /// aborts before any parameter changes.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| {
                CoreError::invalid(format!("gradient for unknown parameter '{name}'"))
            })?;
            if p.shape() != g.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(CoreError::NonFinite(format!(
                    "gradient for '{name}' at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - fmath::powf(c.beta1, t as f64);
        let bc2 = 1.0 - fmath::powf(c.beta2, t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((th, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *th -= lr * c.weight_decay * *th;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *th -= lr * m_hat / (fmath::sqrt(v_hat) + c.epsilon);
            }
        }
        Ok(())
    }
}
