//! SGD with momentum and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::embedding::{clip_temperature, TemperatureParam};
use crate::error::{Error, Result};
use crate::model::{ModelGrads, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Batches whose gradients are averaged before each optimizer step.
    pub grad_accumulation: usize,
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            total_epochs: 30,
            grad_accumulation: 4,
            min_lr_ratio: 0.05,
            batch_size: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!(
                "min_lr_ratio must lie in [0, 1], got {}",
                self.min_lr_ratio
            ));
        }
        if self.grad_accumulation == 0 || self.batch_size == 0 {
            return bad("batch_size and grad_accumulation must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate as a function of the optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: u64) -> Self {
        Self {
            base_lr: cfg.base_lr,
            min_lr: cfg.base_lr * cfg.min_lr_ratio,
            warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
            total_steps: cfg.total_epochs as u64 * steps_per_epoch,
        }
    }

    /// Linear ramp from 0 to `base_lr` over the warmup, then cosine decay
    /// reaching `min_lr` at `total_steps`.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.min_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

pub fn lr_schedule(step: u64, cfg: &TrainConfig, steps_per_epoch: u64) -> f64 {
    Schedule::new(cfg, steps_per_epoch).lr(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub buffers: Vec<Vec<f64>>,
    pub temperature_buffer: f64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ToyModel) -> Self {
        Self {
            buffers: model
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            temperature_buffer: 0.0,
            step: 0,
        }
    }

    pub fn matches(&self, model: &ToyModel) -> bool {
        self.buffers.len() == model.tensors.len()
            && self
                .buffers
                .iter()
                .zip(&model.tensors)
                .all(|(b, t)| b.len() == t.data.len())
    }
}

/// `buf <- momentum * buf + grad + wd * param; param <- param - lr * buf`.
pub fn sgd_update(
    param: &mut [f64],
    grad: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + g + weight_decay * *p;
        *p -= lr * *b;
    }
}

/// One optimizer step on every model tensor and the temperature. The
/// temperature gets no weight decay and is clipped afterwards.
pub fn sgd_step(
    model: &mut ToyModel,
    temperature: &mut TemperatureParam,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if !state.matches(model) || grads.tensors.len() != model.tensors.len() {
        return Err(Error::InvalidData(
            "optimizer state does not match the model".into(),
        ));
    }
    for ((t, g), b) in model
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.buffers)
    {
        sgd_update(&mut t.data, g, b, lr, cfg.momentum, cfg.weight_decay);
    }
    let mut log_scale = [temperature.log_scale];
    let mut tb = [state.temperature_buffer];
    sgd_update(
        &mut log_scale,
        &[grads.d_log_scale],
        &mut tb,
        lr,
        cfg.momentum,
        0.0,
    );
    state.temperature_buffer = tb[0];
    *temperature = clip_temperature(TemperatureParam {
        log_scale: log_scale[0],
        ..*temperature
    });
    state.step += 1;
    Ok(())
}
