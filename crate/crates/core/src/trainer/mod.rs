//! Optimisation loops: supervised denoising score matching and the
//! self-play outer loop with opponent promotion.

pub mod optimizer;
pub mod sft;
pub mod spin;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optimizer::{LrDecay, OptimizerConfig, OptimizerState};
pub use sft::{train_sft, SftConfig, SftOutcome};
pub use spin::{
    generate_cache, run_spin, run_spin_from, spin_iteration, IterationConfig, SpinConfig, SpinIterationState, SpinOutcome,
    SyntheticCache,
};

/// Settings shared by both loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopOptions {
    pub batch_size: usize,
    /// Inner-step checkpoint cadence; 0 disables.
    pub checkpoint_every: usize,
    /// Emit a step record every this many steps (the last step always).
    pub log_every: usize,
    /// Include elapsed seconds in step records. Off by default so metric
    /// files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for LoopOptions {
    fn default() -> Self {
        LoopOptions { batch_size: 64, checkpoint_every: 500, log_every: 10, record_wall_time: false }
    }
}

impl LoopOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        Ok(())
    }

    pub(crate) fn should_log(&self, step: usize, total: usize) -> bool {
        step.is_multiple_of(self.log_every) || step == total
    }
}

/// Raises [`Error::Divergence`] on a non-finite loss or on a loss above ten
/// times its first value for 100 consecutive steps.
#[derive(Debug, Clone, Default)]
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

pub(crate) const DIVERGENCE_FACTOR: f64 = 10.0;
pub(crate) const DIVERGENCE_PATIENCE: usize = 100;

impl DivergenceGuard {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at step {step}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial.abs() {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence(format!(
                    "loss above {DIVERGENCE_FACTOR}x its initial value {initial} for {DIVERGENCE_PATIENCE} steps (step {step})"
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}
