use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

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
            weight_decay: 0.04,
        }
    }
}

/// Which learning rate a tensor is stepped with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Network weights, stepped with `γ1`.
    Model,
    /// Surrogate tables, stepped with `γ2`.
    Surrogate,
}

/// One tensor to update in an [`OptimizerState::step`] call.
pub struct Update<'a> {
    pub name: String,
    pub group: ParamGroup,
    /// Apply decoupled weight decay to this tensor.
    pub decay: bool,
    pub value: &'a mut Matrix,
    pub grad: &'a Matrix,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

/// AdamW moments keyed by tensor name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub lr_params: f64,
    pub lr_surrogates: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, lr_params: f64, lr_surrogates: f64) -> Self {
        OptimizerState {
            config,
            lr_params,
            lr_surrogates,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rates(&mut self, lr_params: f64, lr_surrogates: f64) {
        self.lr_params = lr_params;
        self.lr_surrogates = lr_surrogates;
    }

    /// One AdamW step over every tensor in `updates`. Gradients are checked
    /// before anything is written, so a rejected step leaves both the values
    /// and the optimizer state untouched.
    pub fn step(&mut self, updates: &mut [Update<'_>]) -> Result<()> {
        for u in updates.iter() {
            if u.value.shape() != u.grad.shape() {
                return Err(Error::shape(format!(
                    "{}: value {:?} vs gradient {:?}",
                    u.name,
                    u.value.shape(),
                    u.grad.shape()
                )));
            }
            if !u.grad.is_finite() {
                return Err(Error::NonFiniteGradient(u.name.clone()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for u in updates.iter_mut() {
            let lr = match u.group {
                ParamGroup::Model => self.lr_params,
                ParamGroup::Surrogate => self.lr_surrogates,
            };
            let decay = if u.decay { lr * weight_decay } else { 0.0 };
            let (rows, cols) = u.grad.shape();
            let mo = self.moments.entry(u.name.clone()).or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
            });
            let m = mo.m.as_mut_slice();
            let v = mo.v.as_mut_slice();
            for (i, (x, g)) in u.value.as_mut_slice().iter_mut().zip(u.grad.as_slice()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x = *x * (1.0 - decay) - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, then cosine decay
/// from `base` to `floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub floor: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let warmup = (self.warmup_fraction * self.total_steps as f64).ceil() as u64;
        if step < warmup {
            return self.base * (step + 1) as f64 / warmup as f64;
        }
        let span = self.total_steps.saturating_sub(warmup).max(1);
        cosine_ramp(self.base, self.floor, step - warmup, span)
    }
}

/// Half-cosine interpolation from `start` (step 0) to `end` (step `total`).
pub fn cosine_ramp(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = (step.min(total) as f64) / total as f64;
    end + (start - end) * 0.5 * (1.0 + (PI * frac).cos())
}
