//! AdamW with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use std::f64::consts::PI;

use crate::error::{L4qError, Result};
use crate::layers::{ParamKind, ParamSlot};
use crate::numerics::Real;

/// Smallest value a quantization scale may take after an update.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(L4qError::Config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(L4qError::Config(format!(
                "eps must be positive and weight_decay nonnegative, got {} and {}",
                self.eps, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moment buffers for an ordered list of parameter tensors.
///
/// The slot order passed to [`AdamW::step`] must be the same on every call;
/// buffers are allocated on the first step.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every slot. Nothing is modified if any gradient is
    /// non-finite or the slot layout changed.
    pub fn step<T: Real>(&mut self, slots: &mut [ParamSlot<'_, T>], lr: f64) -> Result<()> {
        self.step_split(slots, lr, lr)
    }

    /// Like [`step`](Self::step), but scales and biases use `quant_lr`.
    pub fn step_split<T: Real>(&mut self, slots: &mut [ParamSlot<'_, T>], lr: f64, quant_lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !(quant_lr >= 0.0) {
            return Err(L4qError::Config(format!(
                "learning rates must be nonnegative, got {lr} and {quant_lr}"
            )));
        }
        for slot in slots.iter() {
            if slot.values.len() != slot.grads.len() {
                return Err(crate::error::shape_err(
                    "AdamW::step",
                    format!("{} gradients for `{}`", slot.values.len(), slot.name),
                    slot.grads.len().to_string(),
                ));
            }
            if slot.grads.iter().any(|g| !g.is_finite()) {
                return Err(L4qError::NonFiniteGradient {
                    name: slot.name.to_string(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = slots.iter().map(|s| vec![0.0; s.values.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != slots.len() || self.m.iter().zip(slots.iter()).any(|(m, s)| m.len() != s.values.len())
        {
            return Err(L4qError::InvalidSpec(
                "optimizer slot layout changed between steps".into(),
            ));
        }

        self.step_count += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for ((slot, m), v) in slots.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if slot.kind.decays() { weight_decay } else { 0.0 };
            let lr = match slot.kind {
                ParamKind::Scale | ParamKind::Bias => quant_lr,
                _ => lr,
            };
            for (i, p) in slot.values.iter_mut().enumerate() {
                let g = slot.grads[i].as_f64();
                let mut x = p.as_f64();
                x -= lr * decay * x;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x -= lr * m_hat / (v_hat.sqrt() + eps);
                if slot.kind == ParamKind::Scale {
                    x = x.max(SCALE_FLOOR);
                }
                *p = T::from_f64(x);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    base_lr: f64,
    total_steps: usize,
    warmup_steps: usize,
}

impl LrSchedule {
    pub const DEFAULT_WARMUP_FRAC: f64 = 0.1;

    pub fn new(base_lr: f64, total_steps: usize) -> Result<Self> {
        Self::with_warmup_frac(base_lr, total_steps, Self::DEFAULT_WARMUP_FRAC)
    }

    /// `warmup_steps = ceil(warmup_frac * total_steps)`.
    pub fn with_warmup_frac(base_lr: f64, total_steps: usize, warmup_frac: f64) -> Result<Self> {
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(L4qError::Config(format!("base learning rate must be finite and >= 0, got {base_lr}")));
        }
        if !(0.0..=1.0).contains(&warmup_frac) {
            return Err(L4qError::Config(format!("warmup_frac must lie in [0, 1], got {warmup_frac}")));
        }
        // tolerate products like 0.1 * 300 = 30.000000000000004
        let warmup_steps = ((warmup_frac * total_steps as f64) - 1e-9).ceil().max(0.0) as usize;
        Ok(Self {
            base_lr,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(step, self)
    }
}

pub fn lr_at(step: usize, schedule: &LrSchedule) -> Result<f64> {
    if step >= schedule.total_steps {
        return Err(L4qError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    let base = schedule.base_lr;
    let warmup = schedule.warmup_steps;
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64;
    let decay = (schedule.total_steps - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (PI * t / decay).cos()))
}
