//! Forward (data-side) and reverse (model-side) diffusion processes.
//!
//! Forward: `x_T ~ N(sqrt(alpha_T) x_0, (1 - alpha_T) I)`, then
//! `x_{t-1} ~ q(x_{t-1} | x_t, x_0) = N(mu_t, sigma_t^2 I)` for `t = T..2`.
//! Reverse: `x_T ~ N(0, I)`, then `x_{t-1} ~ N(mu_theta(x_t, c, t), sigma_t^2 I)`
//! for `t = T..1`.
//!
//! Every sampler draws its noise in a fixed order from one stream, including
//! draws that a zero `sigma_t` multiplies away, so a [`StreamId`] fully
//! determines the output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, StreamId};
use crate::schedule::NoiseSchedule;
use crate::score_net::{eval_scores, Condition, ScoreModelParams, ScoreQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairProvenance {
    Real,
    SyntheticBackward,
    SyntheticForwardized,
}

/// A full path `x_0..x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub condition: Condition,
    /// `states[t]` is `x_t`.
    pub states: Vec<Vec<f64>>,
    pub provenance: Provenance,
    pub seed: StreamId,
    /// Checksum of the generating parameters, for synthetic paths.
    pub model: Option<[u8; 32]>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn x0(&self) -> &[f64] {
        &self.states[0]
    }
}

/// One `(x_{t-1}, x_t)` transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPair {
    pub condition: Condition,
    pub x_prev: Vec<f64>,
    pub x_curr: Vec<f64>,
    pub t: usize,
    pub provenance: PairProvenance,
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::Dimension { expected, got })
    } else {
        Ok(())
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`.
pub fn forward_marginal_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    schedule.check_step(t)?;
    let (a, s) = (schedule.alpha(t).sqrt(), (1.0 - schedule.alpha(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Mean `mu_t` of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean(x0: &[f64], x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x0.len(), x_t.len())?;
    schedule.check_step(t)?;
    let ap = schedule.alpha(t - 1);
    let at = schedule.alpha(t);
    let c = (1.0 - ap - schedule.sigma(t).powi(2)).max(0.0).sqrt();
    Ok(x0
        .iter()
        .zip(x_t)
        .map(|(x0, xt)| ap.sqrt() * x0 + c * (xt - at.sqrt() * x0) / (1.0 - at).sqrt())
        .collect())
}

fn posterior_sample(x0: &[f64], x_t: &[f64], t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut mean = posterior_mean(x0, x_t, t, schedule)?;
    let noise = rng::standard_normal(rng, x0.len());
    let s = schedule.sigma(t);
    for (m, n) in mean.iter_mut().zip(noise) {
        *m += s * n;
    }
    Ok(mean)
}

/// Samples `x_{1:T} ~ q(. | x_0)` through the per-step posteriors.
pub fn forward_trajectory(
    x0: &[f64],
    condition: Condition,
    schedule: &NoiseSchedule,
    seed: StreamId,
) -> Result<Trajectory> {
    check_finite(x0, "x0")?;
    let steps = schedule.steps();
    let mut rng = seed.rng();
    let mut states = vec![Vec::new(); steps + 1];
    let eps = rng::standard_normal(&mut rng, x0.len());
    states[steps] = forward_marginal_sample(x0, steps, &eps, schedule)?;
    for t in (2..=steps).rev() {
        states[t - 1] = posterior_sample(x0, &states[t], t, schedule, &mut rng)?;
    }
    states[0] = x0.to_vec();
    Ok(Trajectory { condition, states, provenance: Provenance::Real, seed, model: None })
}

/// `(x_t coefficient, eps coefficient)` of `mu_theta`:
/// `mu_theta = a x_t + b eps_theta`.
pub fn mu_coefficients(t: usize, schedule: &NoiseSchedule) -> (f64, f64) {
    let (ap, at, s) = (schedule.alpha(t - 1), schedule.alpha(t), schedule.sigma(t));
    let a = ap.sqrt() / at.sqrt();
    let b = (1.0 - ap - s * s).max(0.0).sqrt() - ap.sqrt() * (1.0 - at).sqrt() / at.sqrt();
    (a, b)
}

/// Reverse-step mean from a given noise prediction.
pub fn mu_from_eps(x_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let (ap, at, s) = (schedule.alpha(t - 1), schedule.alpha(t), schedule.sigma(t));
    let c = (1.0 - ap - s * s).max(0.0).sqrt();
    x_t.iter()
        .zip(eps)
        .map(|(x, e)| ap.sqrt() * ((x - (1.0 - at).sqrt() * e) / at.sqrt()) + c * e)
        .collect()
}

/// `mu_theta(x_t, c, t)` under `params`.
pub fn mu_theta(
    x_t: &[f64],
    condition: Condition,
    t: usize,
    params: &ScoreModelParams,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let q = ScoreQuery { x: x_t, condition: condition.label, t };
    let eps = eval_scores(params, &[q], schedule.steps())?.into_data();
    Ok(mu_from_eps(x_t, &eps, t, schedule))
}

/// Runs many reverse chains in lockstep with batched network evaluation.
/// Chain `i` draws exclusively from `rngs[i]`. Returns all states per chain
/// when `keep_states`, otherwise only `x_0`.
fn reverse_chains(
    params: &ScoreModelParams,
    labels: &[usize],
    schedule: &NoiseSchedule,
    x_init: Vec<Vec<f64>>,
    rngs: &mut [Rng],
    keep_states: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let steps = schedule.steps();
    let mut current = x_init;
    let mut history: Vec<Vec<Vec<f64>>> = if keep_states {
        current.iter().map(|x| vec![x.clone()]).collect()
    } else {
        Vec::new()
    };
    for t in (1..=steps).rev() {
        let queries: Vec<ScoreQuery<'_>> = current
            .iter()
            .zip(labels)
            .map(|(x, &c)| ScoreQuery { x, condition: c, t })
            .collect();
        let eps = eval_scores(params, &queries, steps)?;
        let s = schedule.sigma(t);
        let next: Vec<Vec<f64>> = current
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut m = mu_from_eps(x, eps.row(i), t, schedule);
                let noise = rng::standard_normal(&mut rngs[i], x.len());
                for (v, n) in m.iter_mut().zip(noise) {
                    *v += s * n;
                }
                m
            })
            .collect();
        for x in &next {
            check_finite(x, "reverse sampler state (divergence)")?;
        }
        if keep_states {
            for (h, x) in history.iter_mut().zip(&next) {
                h.push(x.clone());
            }
        }
        current = next;
    }
    if keep_states {
        for h in &mut history {
            h.reverse();
        }
        Ok(history)
    } else {
        Ok(current.into_iter().map(|x| vec![x]).collect())
    }
}

/// Samples `x_{0:T} ~ p_theta(. | c)`.
pub fn reverse_sample(
    params: &ScoreModelParams,
    condition: Condition,
    schedule: &NoiseSchedule,
    seed: StreamId,
) -> Result<Trajectory> {
    let mut rng = seed.rng();
    let x_t = rng::standard_normal(&mut rng, params.arch().data_dim);
    reverse_sample_from(params, condition, schedule, x_t, rng, seed)
}

/// Reverse sampling from a given `x_T`, continuing on `rng`.
pub fn reverse_sample_from(
    params: &ScoreModelParams,
    condition: Condition,
    schedule: &NoiseSchedule,
    x_t: Vec<f64>,
    rng: Rng,
    seed: StreamId,
) -> Result<Trajectory> {
    check_dim(params.arch().data_dim, x_t.len())?;
    let mut rngs = [rng];
    let states = reverse_chains(params, &[condition.label], schedule, vec![x_t], &mut rngs, true)?
        .pop()
        .expect("one chain");
    Ok(Trajectory {
        condition,
        states,
        provenance: Provenance::Synthetic,
        seed,
        model: Some(params.checksum()),
    })
}

const CHAIN_BLOCK: usize = 256;

fn reverse_batch(
    params: &ScoreModelParams,
    conditions: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
    domain: u64,
    keep_states: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = params.arch().data_dim;
    let blocks: Vec<Result<Vec<Vec<Vec<f64>>>>> = conditions
        .par_chunks(CHAIN_BLOCK)
        .enumerate()
        .map(|(b, labels)| {
            let base = (b * CHAIN_BLOCK) as u64;
            let mut rngs: Vec<Rng> =
                (0..labels.len()).map(|i| rng::stream(seed, domain, base + i as u64)).collect();
            let init = rngs.iter_mut().map(|r| rng::standard_normal(r, d)).collect();
            reverse_chains(params, labels, schedule, init, &mut rngs, keep_states)
        })
        .collect();
    let mut out = Vec::with_capacity(conditions.len());
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

/// `x_0` samples, chain `i` seeded by `StreamId::new(seed, domain, i)`.
/// Identical to calling [`reverse_sample`] per chain.
pub fn reverse_sample_x0(
    params: &ScoreModelParams,
    conditions: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
    domain: u64,
) -> Result<Vec<Vec<f64>>> {
    Ok(reverse_batch(params, conditions, schedule, seed, domain, false)?
        .into_iter()
        .map(|mut s| s.pop().expect("x0"))
        .collect())
}

/// Full synthetic trajectories, seeded like [`reverse_sample_x0`].
pub fn reverse_trajectories(
    params: &ScoreModelParams,
    conditions: &[Condition],
    schedule: &NoiseSchedule,
    seed: u64,
    domain: u64,
) -> Result<Vec<Trajectory>> {
    let labels: Vec<usize> = conditions.iter().map(|c| c.label).collect();
    let model = Some(params.checksum());
    Ok(reverse_batch(params, &labels, schedule, seed, domain, true)?
        .into_iter()
        .zip(conditions)
        .enumerate()
        .map(|(i, (states, &condition))| Trajectory {
            condition,
            states,
            provenance: Provenance::Synthetic,
            seed: StreamId::new(seed, domain, i as u64),
            model,
        })
        .collect())
}

/// The `T` consecutive pairs of a trajectory, `t = 1..T`.
pub fn pairs_from_trajectory(traj: &Trajectory) -> Vec<StepPair> {
    let provenance = match traj.provenance {
        Provenance::Real => PairProvenance::Real,
        Provenance::Synthetic => PairProvenance::SyntheticBackward,
    };
    (1..traj.states.len())
        .map(|t| StepPair {
            condition: traj.condition,
            x_prev: traj.states[t - 1].clone(),
            x_curr: traj.states[t].clone(),
            t,
            provenance,
        })
        .collect()
}

fn marginal_pair(
    x0: &[f64],
    condition: Condition,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    provenance: PairProvenance,
) -> Result<StepPair> {
    schedule.check_step(t)?;
    let eps = rng::standard_normal(rng, x0.len());
    let x_curr = forward_marginal_sample(x0, t, &eps, schedule)?;
    let x_prev = if t == 1 {
        // q(x_0 | x_1, x_0) is a point mass at x_0; still consume the draw.
        let _ = rng::standard_normal(rng, x0.len());
        x0.to_vec()
    } else {
        posterior_sample(x0, &x_curr, t, schedule, rng)?
    };
    Ok(StepPair { condition, x_prev, x_curr, t, provenance })
}

/// Forward-process pair built around a synthetic `x_0'`.
pub fn forwardized_synthetic_pair(
    x0_synthetic: &[f64],
    condition: Condition,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<StepPair> {
    marginal_pair(x0_synthetic, condition, t, schedule, rng, PairProvenance::SyntheticForwardized)
}

/// Real pair via the closed-form marginal of `x_t` then the posterior.
/// Same distribution as taking step `t` of [`forward_trajectory`].
pub fn real_pair(x0: &[f64], condition: Condition, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<StepPair> {
    marginal_pair(x0, condition, t, schedule, rng, PairProvenance::Real)
}
