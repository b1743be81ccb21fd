//! Adaptive moment estimation with decoupled weight decay and a
//! warmup-then-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score_net::ScoreModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    Constant,
    /// Linear to zero at the last step.
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub decay: LrDecay,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup: 200,
            decay: LrDecay::Linear,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("optimizer needs lr > 0 and moment decays in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer needs eps > 0 and weight_decay >= 0"));
        }
        Ok(())
    }

    /// Learning rate of update `step` (1-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = self.warmup.min(total.saturating_sub(1));
        if step <= warm {
            return self.lr * step as f64 / warm as f64;
        }
        match self.decay {
            LrDecay::Constant => self.lr,
            LrDecay::Linear => self.lr * (total + 1 - step) as f64 / (total - warm) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub total_steps: usize,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: usize, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, total_steps, step: 0, m: vec![0.0; params], v: vec![0.0; params] })
    }

    /// Applies one update and returns the learning rate used.
    pub fn update(&mut self, params: &mut ScoreModelParams, grad: &[f64]) -> Result<f64> {
        if grad.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step, self.total_steps.max(self.step));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.flat_mut().iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
        }
        Ok(lr)
    }
}
