//! Noise schedules `{alpha_t}`, `{sigma_t}` and the per-step coefficients
//! derived from them.
//!
//! `alpha` is the cumulative signal level: `q(x_t | x_0) = N(sqrt(alpha_t) x_0,
//! (1 - alpha_t) I)`, with `alpha_0 = 1`. `sigma_t` is the standard deviation of
//! the reverse step `t -> t-1`, interpolated between the deterministic DDIM
//! sampler (`eta = 0`) and the DDPM posterior (`eta = 1`).
//!
//! The coefficient `h_t` relates a reverse-step residual to a noise-prediction
//! residual:
//!
//! ```text
//! x_{t-1} - mu_theta(x_t) = h_t (eps - eps_theta(x_t)) + sigma_t eps_hat
//! h_t = sqrt(1 - alpha_{t-1} - sigma_t^2) - sqrt(alpha_{t-1} / alpha_t) sqrt(1 - alpha_t)
//! ```
//!
//! Note the trailing factor is `sqrt(1 - alpha_t)`. A variant with
//! `sqrt(1 - alpha_{t-1})` is sometimes quoted; it does not satisfy the
//! identity above (see [`h_coefficient_alt`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest allowed terminal signal level.
pub const MAX_TERMINAL_ALPHA: f64 = 0.05;
/// Terminal signal level reached by the built-in shapes.
pub const TERMINAL_ALPHA: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleShape {
    /// Squared-cosine cumulative level, affinely floored at [`TERMINAL_ALPHA`].
    #[default]
    Cosine,
    /// `alpha_t` linear in `t` from 1 down to [`TERMINAL_ALPHA`].
    LinearCumulative,
}

/// How the per-step SPIN weights `beta_t` are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BetaPolicy {
    /// `beta_t = s` for every step.
    Constant,
    /// `beta_t = s * gamma_t / h_t^2`, which turns `beta_t h_t^2` into `s gamma_t`.
    #[default]
    GammaMatched,
}

/// Validated schedule. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleArrays", into = "ScheduleArrays")]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<f64>,
    h: Vec<f64>,
}

/// Explicit array form used by run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleArrays {
    /// `alpha_0..alpha_T`.
    pub alpha: Vec<f64>,
    /// `sigma_1..sigma_T`.
    pub sigma: Vec<f64>,
    /// `gamma_1..gamma_T`.
    pub gamma: Vec<f64>,
}

impl TryFrom<ScheduleArrays> for NoiseSchedule {
    type Error = Error;

    fn try_from(a: ScheduleArrays) -> Result<Self> {
        NoiseSchedule::from_parts(a.alpha, a.sigma, a.gamma)
    }
}

impl From<NoiseSchedule> for ScheduleArrays {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleArrays { alpha: s.alpha, sigma: s.sigma, gamma: s.gamma }
    }
}

/// Builds a schedule of `steps` steps with the given shape and DDIM `eta`.
pub fn make_schedule(steps: usize, shape: ScheduleShape, eta: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    let alpha = match shape {
        ScheduleShape::Cosine => cosine_alphas(steps),
        ScheduleShape::LinearCumulative => (0..=steps)
            .map(|t| 1.0 - (t as f64 / steps as f64) * (1.0 - TERMINAL_ALPHA))
            .collect(),
    };
    NoiseSchedule::from_alphas(alpha, eta)
}

fn cosine_alphas(steps: usize) -> Vec<f64> {
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    (0..=steps)
        .map(|t| {
            if t == 0 {
                1.0
            } else {
                TERMINAL_ALPHA + (1.0 - TERMINAL_ALPHA) * (f(t) / f0)
            }
        })
        .collect()
}

/// DDPM posterior standard deviation for step `t` (zero at `t = 1`).
pub fn ddpm_sigma(alpha_prev: f64, alpha_t: f64) -> f64 {
    ((1.0 - alpha_prev) / (1.0 - alpha_t)).sqrt() * (1.0 - alpha_t / alpha_prev).sqrt()
}

/// `h_t` as used throughout the crate.
pub fn h_coefficient(alpha_prev: f64, alpha_t: f64, sigma_t: f64) -> f64 {
    (1.0 - alpha_prev - sigma_t * sigma_t).max(0.0).sqrt()
        - (alpha_prev / alpha_t).sqrt() * (1.0 - alpha_t).sqrt()
}

/// Variant with `sqrt(1 - alpha_{t-1})` as the trailing factor. Kept only so
/// tests can show it breaks the residual identity.
pub fn h_coefficient_alt(alpha_prev: f64, alpha_t: f64, sigma_t: f64) -> f64 {
    (1.0 - alpha_prev - sigma_t * sigma_t).max(0.0).sqrt()
        - (alpha_prev / alpha_t).sqrt() * (1.0 - alpha_prev).sqrt()
}

impl NoiseSchedule {
    /// Schedule from cumulative levels with `sigma_t = eta * sigma_ddpm(t)` and
    /// unit DSM weights.
    pub fn from_alphas(alpha: Vec<f64>, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Schedule(format!("eta must lie in [0, 1], got {eta}")));
        }
        if alpha.len() < 3 {
            return Err(Error::Schedule("need at least 2 steps".into()));
        }
        let steps = alpha.len() - 1;
        let sigma = (1..=steps)
            .map(|t| if t == 1 { 0.0 } else { eta * ddpm_sigma(alpha[t - 1], alpha[t]) })
            .collect();
        Self::from_parts(alpha, sigma, vec![1.0; steps])
    }

    /// Validates explicit arrays and derives `h`.
    pub fn from_parts(alpha: Vec<f64>, sigma: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if alpha.len() < 3 {
            return Err(Error::Schedule("need at least 2 steps".into()));
        }
        let steps = alpha.len() - 1;
        if sigma.len() != steps || gamma.len() != steps {
            return Err(Error::Schedule(format!(
                "sigma and gamma need {steps} entries, got {} and {}",
                sigma.len(),
                gamma.len()
            )));
        }
        if alpha[0] != 1.0 {
            return Err(Error::Schedule(format!("alpha_0 must be exactly 1, got {}", alpha[0])));
        }
        for t in 1..=steps {
            let (prev, cur) = (alpha[t - 1], alpha[t]);
            if !(cur > 0.0 && cur < prev) {
                return Err(Error::Schedule(format!(
                    "alpha must be positive and strictly decreasing (alpha_{t} = {cur}, alpha_{} = {prev})",
                    t - 1
                )));
            }
        }
        if alpha[steps] > MAX_TERMINAL_ALPHA {
            return Err(Error::Schedule(format!(
                "terminal alpha {} exceeds {MAX_TERMINAL_ALPHA}",
                alpha[steps]
            )));
        }
        for (i, &s) in sigma.iter().enumerate() {
            let t = i + 1;
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Schedule(format!("sigma_{t} = {s} is not a valid scale")));
            }
            if s * s > 1.0 - alpha[t - 1] {
                return Err(Error::Schedule(format!(
                    "sigma_{t}^2 = {} exceeds 1 - alpha_{} = {}",
                    s * s,
                    t - 1,
                    1.0 - alpha[t - 1]
                )));
            }
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            return Err(Error::Schedule(format!("DSM weights must be positive, got {g}")));
        }
        let h = (1..=steps).map(|t| h_coefficient(alpha[t - 1], alpha[t], sigma[t - 1])).collect();
        Ok(NoiseSchedule { alpha, sigma, gamma, h })
    }

    /// Replaces the DSM weights.
    pub fn with_gamma(self, gamma: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.alpha, self.sigma, gamma)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    /// `alpha_t` for `t` in `0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `sigma_t` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn h(&self, t: usize) -> f64 {
        self.h[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// True when every reverse step is deterministic.
    pub fn is_deterministic(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Posterior mean coefficients `(a, b)` with `mu_t = a x_0 + b x_t` for
    /// `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let (ap, at, s) = (self.alpha(t - 1), self.alpha(t), self.sigma(t));
        let c = (1.0 - ap - s * s).max(0.0).sqrt();
        let b = c / (1.0 - at).sqrt();
        (ap.sqrt() - b * at.sqrt(), b)
    }
}

/// Per-step SPIN weights `beta_1..beta_T`.
pub fn beta_schedule(schedule: &NoiseSchedule, policy: BetaPolicy, scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("beta scale must be positive, got {scale}")));
    }
    let steps = schedule.steps();
    match policy {
        BetaPolicy::Constant => Ok(vec![scale; steps]),
        BetaPolicy::GammaMatched => (1..=steps)
            .map(|t| {
                let h = schedule.h(t);
                if h == 0.0 {
                    Err(Error::Schedule(format!("h_{t} = 0, gamma-matched beta is undefined")))
                } else {
                    Ok(scale * schedule.gamma(t) / (h * h))
                }
            })
            .collect(),
    }
}

/// KL weight implied by `sigma_t^2 = lambda T / (2 beta_t)` at each step.
/// Zero where `sigma_t = 0`.
pub fn implied_lambda(schedule: &NoiseSchedule, beta: &[f64]) -> Vec<f64> {
    let steps = schedule.steps() as f64;
    (1..=schedule.steps())
        .map(|t| 2.0 * beta[t - 1] * schedule.sigma(t).powi(2) / steps)
        .collect()
}
