//! The self-play outer loop. Each iteration freezes the current model as
//! the opponent, samples a synthetic cache from it, trains a fresh copy
//! against real data versus that cache, and promotes the result.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DivergenceGuard, LoopOptions, OptimizerConfig, OptimizerState};
use crate::data::Dataset;
use crate::diffusion::{
    forward_trajectory, forwardized_synthetic_pair, pairs_from_trajectory, real_pair, reverse_sample_x0,
    reverse_trajectories, StepPair, Trajectory,
};
use crate::error::{Error, Result};
use crate::eval::hex;
use crate::losses::spin::spin_terms;
use crate::losses::{
    EllKind, LossVariant, NoisedSample, Pairing, SpinBatch, SpinLossConfig, SyntheticPairs, TrajectoryPair,
};
use crate::metrics::{CheckpointTag, MetricRecord, Observer};
use crate::rng::{self, domain, StreamId};
use crate::schedule::{beta_schedule, implied_lambda, BetaPolicy, NoiseSchedule};
use crate::score_net::{Condition, Graph, ScoreModelParams};

/// Per-iteration knobs; iterations may differ in all three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinConfig {
    pub ell: EllKind,
    pub variant: LossVariant,
    pub synthetic_pairs: SyntheticPairs,
    pub pairing: Pairing,
    pub shared_t: bool,
    pub lambda: f64,
    pub beta_policy: BetaPolicy,
    pub iterations: Vec<IterationConfig>,
    pub optimizer: OptimizerConfig,
    pub options: LoopOptions,
    /// Share of dataset records that receive a synthetic partner each
    /// iteration.
    pub synthetic_fraction: f64,
    /// Resample the synthetic cache after every pass over it.
    pub regenerate_each_epoch: bool,
    /// Build real pairs from full forward trajectories instead of the
    /// equivalent marginal-then-posterior draw.
    pub real_from_trajectories: bool,
    /// Log the mean path test function at every logged step (exact variant
    /// only; needs `sigma_t > 0` for `t >= 2`).
    pub test_function_diagnostics: bool,
    pub seed: u64,
}

impl SpinConfig {
    pub fn new(iterations: Vec<IterationConfig>, seed: u64) -> Self {
        SpinConfig {
            ell: EllKind::default(),
            variant: LossVariant::default(),
            synthetic_pairs: SyntheticPairs::default(),
            pairing: Pairing::default(),
            shared_t: true,
            lambda: 1.0,
            beta_policy: BetaPolicy::default(),
            iterations,
            optimizer: OptimizerConfig::default(),
            options: LoopOptions::default(),
            synthetic_fraction: 1.0,
            regenerate_each_epoch: false,
            real_from_trajectories: false,
            test_function_diagnostics: false,
            seed,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.options.validate()?;
        if self.iterations.is_empty() {
            return Err(Error::config("at least one self-play iteration is required"));
        }
        if !(self.synthetic_fraction > 0.0 && self.synthetic_fraction <= 1.0) {
            return Err(Error::config(format!(
                "synthetic_fraction must lie in (0, 1], got {}",
                self.synthetic_fraction
            )));
        }
        for (k, it) in self.iterations.iter().enumerate() {
            self.optimizer_for(it).validate()?;
            self.loss_config(it, schedule)
                .and_then(|c| c.validate(schedule))
                .map_err(|e| Error::config(format!("iteration {}: {e}", k + 1)))?;
        }
        if self.test_function_diagnostics {
            if self.variant != LossVariant::Exact {
                return Err(Error::config("test function diagnostics need the exact variant"));
            }
            if let Some(t) = (2..=schedule.steps()).find(|&t| schedule.sigma(t) == 0.0) {
                return Err(Error::config(format!(
                    "test function diagnostics need sigma_t > 0 for t >= 2; sigma_{t} = 0"
                )));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self, it: &IterationConfig, schedule: &NoiseSchedule) -> Result<SpinLossConfig> {
        Ok(SpinLossConfig {
            ell: self.ell,
            beta: beta_schedule(schedule, self.beta_policy, it.beta_scale)?,
            lambda: self.lambda,
            synthetic_pairs: self.synthetic_pairs,
            variant: self.variant,
            pairing: self.pairing,
            shared_t: self.shared_t,
        })
    }

    fn optimizer_for(&self, it: &IterationConfig) -> OptimizerConfig {
        OptimizerConfig { lr: it.lr, ..self.optimizer }
    }

    fn needs_trajectories(&self) -> bool {
        self.synthetic_pairs == SyntheticPairs::Backward
    }
}

/// Opponent samples for one iteration, each tied to a dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCache {
    /// Dataset record behind entry `i`.
    pub records: Vec<usize>,
    pub x0: Vec<Vec<f64>>,
    /// Full reverse paths, kept when synthetic pairs are backward.
    pub trajectories: Option<Vec<Trajectory>>,
    /// Content hash.
    pub id: String,
}

impl SyntheticCache {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Independent seed for a named sub-task of iteration `k`.
fn sub_seed(seed: u64, domain: u64, k: usize, index: u64) -> u64 {
    rng::stream(seed, domain, ((k as u64) << 32) | index).random()
}

/// Samples the cache of iteration `k` (0-based), pass `epoch`.
pub fn generate_cache(
    opponent: &ScoreModelParams,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &SpinConfig,
    k: usize,
    epoch: usize,
) -> Result<SyntheticCache> {
    let seed = sub_seed(cfg.seed, domain::SYNTHETIC, k, epoch as u64);
    let mut records: Vec<usize> = (0..dataset.len()).collect();
    let keep = ((cfg.synthetic_fraction * dataset.len() as f64).ceil() as usize).clamp(1, dataset.len());
    if keep < dataset.len() {
        records.shuffle(&mut rng::stream(seed, domain::SYNTHETIC, u64::MAX));
        records.truncate(keep);
        records.sort_unstable();
    }
    let labels: Vec<usize> = records.iter().map(|&i| dataset.records[i].label).collect();
    let (x0, trajectories) = if cfg.needs_trajectories() {
        let conds = labels
            .iter()
            .map(|&l| Condition::new(l, dataset.num_conditions()))
            .collect::<Result<Vec<_>>>()?;
        let trajs = reverse_trajectories(opponent, &conds, schedule, seed, domain::SYNTHETIC)?;
        (trajs.iter().map(|t| t.x0().to_vec()).collect(), Some(trajs))
    } else {
        (reverse_sample_x0(opponent, &labels, schedule, seed, domain::SYNTHETIC)?, None)
    };
    let mut h = Sha256::new();
    h.update(opponent.checksum());
    h.update((k as u64).to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    for (r, x) in records.iter().zip(&x0) {
        h.update((*r as u64).to_le_bytes());
        for v in x {
            h.update(v.to_le_bytes());
        }
    }
    if let Some(ts) = &trajectories {
        for v in ts.iter().flat_map(|t| t.states.iter().flatten()) {
            h.update(v.to_le_bytes());
        }
    }
    let id = hex(&h.finalize()[..8]);
    Ok(SyntheticCache { records, x0, trajectories, id })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinIterationState {
    /// Completed iterations.
    pub k: usize,
    /// Main player; equal to `theta_k` between iterations.
    pub theta: ScoreModelParams,
    pub theta_k: ScoreModelParams,
    /// Cache of the last completed iteration.
    pub cache: Option<SyntheticCache>,
}

impl SpinIterationState {
    pub fn new(init: ScoreModelParams) -> Self {
        SpinIterationState { k: 0, theta: init.clone(), theta_k: init, cache: None }
    }

    /// Resumes after `k` completed iterations from the opponent they produced.
    pub fn resume(k: usize, params: ScoreModelParams) -> Self {
        SpinIterationState { k, ..Self::new(params) }
    }
}

/// Draws the minibatch of inner step `step` (1-based).
pub(crate) struct BatchBuilder<'a> {
    dataset: &'a Dataset,
    schedule: &'a NoiseSchedule,
    cfg: &'a SpinConfig,
    cache: &'a SyntheticCache,
    /// Cache positions per condition, for shuffled pairing.
    by_condition: Vec<Vec<usize>>,
    k: usize,
}

impl<'a> BatchBuilder<'a> {
    fn new(
        dataset: &'a Dataset,
        schedule: &'a NoiseSchedule,
        cfg: &'a SpinConfig,
        cache: &'a SyntheticCache,
        k: usize,
    ) -> Self {
        let mut by_condition = vec![Vec::new(); dataset.num_conditions()];
        for (pos, &r) in cache.records.iter().enumerate() {
            by_condition[dataset.records[r].label].push(pos);
        }
        BatchBuilder { dataset, schedule, cfg, cache, by_condition, k }
    }

    fn build(&self, step: usize) -> Result<SpinBatch> {
        let step_seed = sub_seed(self.cfg.seed, domain::BATCH, self.k, step as u64);
        let mut r = rng::stream(step_seed, domain::BATCH, 0);
        let n = self.cfg.options.batch_size;
        let steps = self.schedule.steps();
        let c = self.dataset.num_conditions();
        let mut picks = Vec::with_capacity(n);
        for _ in 0..n {
            let pos = r.random_range(0..self.cache.len());
            let rec = &self.dataset.records[self.cache.records[pos]];
            let partner = match self.cfg.pairing {
                Pairing::Aligned => pos,
                Pairing::Shuffled => {
                    let same = &self.by_condition[rec.label];
                    same[r.random_range(0..same.len())]
                }
            };
            let t_real = r.random_range(1..=steps);
            let t_synth = if self.cfg.shared_t { t_real } else { r.random_range(1..=steps) };
            picks.push((rec, Condition::new(rec.label, c)?, partner, t_real, t_synth));
        }
        let trajectory = |pos: usize| -> Result<&Trajectory> {
            self.cache
                .trajectories
                .as_ref()
                .map(|ts| &ts[pos])
                .ok_or_else(|| Error::config("synthetic cache holds no trajectories"))
        };
        let real_traj = |i: usize, x0: &[f64], cond| {
            forward_trajectory(x0, cond, self.schedule, StreamId::new(step_seed, domain::BATCH, 1 + i as u64))
        };
        match self.cfg.variant {
            LossVariant::Exact => picks
                .iter()
                .enumerate()
                .map(|(i, (rec, cond, partner, _, _))| {
                    Ok(TrajectoryPair { real: real_traj(i, &rec.x0, *cond)?, synth: trajectory(*partner)?.clone() })
                })
                .collect::<Result<_>>()
                .map(SpinBatch::Trajectories),
            LossVariant::ApproxMu => {
                let mut real = Vec::with_capacity(n);
                let mut synth = Vec::with_capacity(n);
                for (i, (rec, cond, partner, tr, ts)) in picks.iter().enumerate() {
                    real.push(if self.cfg.real_from_trajectories {
                        pairs_from_trajectory(&real_traj(i, &rec.x0, *cond)?).swap_remove(tr - 1)
                    } else {
                        real_pair(&rec.x0, *cond, *tr, self.schedule, &mut r)?
                    });
                    synth.push(match self.cfg.synthetic_pairs {
                        SyntheticPairs::Backward => backward_pair(trajectory(*partner)?, *ts),
                        SyntheticPairs::Forwardized => {
                            forwardized_synthetic_pair(&self.cache.x0[*partner], *cond, *ts, self.schedule, &mut r)?
                        }
                    });
                }
                Ok(SpinBatch::Pairs { real, synth })
            }
            LossVariant::ApproxEps => {
                let mut real = Vec::with_capacity(n);
                let mut synth = Vec::with_capacity(n);
                for (rec, cond, partner, tr, ts) in &picks {
                    let eps = rng::standard_normal(&mut r, self.dataset.dim());
                    real.push(NoisedSample::new(&rec.x0, *cond, eps, *tr, self.schedule)?);
                    synth.push(match self.cfg.synthetic_pairs {
                        SyntheticPairs::Backward => {
                            let traj = trajectory(*partner)?;
                            // the target is replaced by the opponent's prediction
                            NoisedSample { condition: *cond, x_t: traj.states[*ts].clone(), eps: vec![0.0; self.dataset.dim()], t: *ts }
                        }
                        SyntheticPairs::Forwardized => {
                            let eps = rng::standard_normal(&mut r, self.dataset.dim());
                            NoisedSample::new(&self.cache.x0[*partner], *cond, eps, *ts, self.schedule)?
                        }
                    });
                }
                Ok(SpinBatch::Noised { real, synth })
            }
        }
    }
}

fn backward_pair(traj: &Trajectory, t: usize) -> StepPair {
    pairs_from_trajectory(traj).swap_remove(t - 1)
}

/// Loss, gradient and diagnostics of one batch.
struct StepEval {
    loss: f64,
    grad: Vec<f64>,
    mean_argument: f64,
    weight_mean: f64,
    weight_max: f64,
    guard_events: usize,
}

fn evaluate_step(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &SpinBatch,
    loss_cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<StepEval> {
    let terms = spin_terms(theta, theta_k, batch, loss_cfg, schedule)?;
    let mut g = Graph::new(theta);
    let u = terms.arguments(&mut g);
    let l = g.ell(u, loss_cfg.ell);
    let out = g.mean(l);
    let loss = g.scalar(out)?;
    let grad = g.backward(out)?;
    let args = g.value(u).data();
    let n = args.len() as f64;
    let weights: Vec<f64> = args.iter().map(|&a| -loss_cfg.ell.derivative(a)).collect();
    Ok(StepEval {
        loss,
        grad,
        mean_argument: args.iter().sum::<f64>() / n,
        weight_mean: weights.iter().sum::<f64>() / n,
        weight_max: weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        guard_events: g.stats().guard_events,
    })
}

fn mean_test_function(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &SpinBatch,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> Result<Option<f64>> {
    let SpinBatch::Trajectories(pairs) = batch else { return Ok(None) };
    let mut total = 0.0;
    for p in pairs {
        total += crate::losses::test_function(theta, theta_k, &p.synth, lambda, schedule)?;
    }
    Ok(Some(total / pairs.len() as f64))
}

/// Runs iteration `state.k + 1` and promotes its result.
pub fn spin_iteration(
    state: SpinIterationState,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &SpinConfig,
    observer: &mut dyn Observer,
) -> Result<SpinIterationState> {
    cfg.validate(schedule)?;
    check_shapes(&state.theta_k, dataset)?;
    let k = state.k;
    let it = cfg
        .iterations
        .get(k)
        .ok_or_else(|| Error::config(format!("no configuration for iteration {}", k + 1)))?;
    let iteration = k + 1;
    let loss_cfg = cfg.loss_config(it, schedule)?;
    let theta_k = state.theta_k;
    let opponent_sum = theta_k.checksum();
    let mut theta = theta_k.clone();

    let mut cache = generate_cache(&theta_k, dataset, schedule, cfg, k, 0)?;
    let epoch_len = cache.len().div_ceil(cfg.options.batch_size).max(1);
    let mut epoch = 0;
    let mut builder_cache = cache.clone();

    let initial = {
        let b = BatchBuilder::new(dataset, schedule, cfg, &cache, k).build(1)?;
        evaluate_step(&theta, &theta_k, &b, &loss_cfg, schedule)?.loss
    };
    observer.record(&MetricRecord::IterationStart {
        iteration,
        opponent: hex(&opponent_sum),
        cache_id: cache.id.clone(),
        cache_size: cache.len(),
        steps: it.steps,
        lr: it.lr,
        beta_scale: it.beta_scale,
        implied_lambda: implied_lambda(schedule, &loss_cfg.beta),
        beta: loss_cfg.beta.clone(),
        initial_loss: initial,
    })?;

    let mut opt = OptimizerState::new(cfg.optimizer_for(it), theta.len(), it.steps)?;
    let mut guard = DivergenceGuard::default();
    let mut guard_events = 0;
    let start = Instant::now();
    for step in 1..=it.steps {
        if cfg.regenerate_each_epoch && step > 1 && (step - 1) % epoch_len == 0 {
            epoch += 1;
            builder_cache = generate_cache(&theta_k, dataset, schedule, cfg, k, epoch)?;
            cache = builder_cache.clone();
        }
        let batch = BatchBuilder::new(dataset, schedule, cfg, &builder_cache, k).build(step)?;
        let ev = evaluate_step(&theta, &theta_k, &batch, &loss_cfg, schedule)?;
        guard.observe(step, ev.loss)?;
        let lr = opt.update(&mut theta, &ev.grad)?;
        if theta_k.checksum() != opponent_sum {
            return Err(Error::Grad("opponent parameters changed during an update".into()));
        }
        guard_events += ev.guard_events;
        if cfg.options.should_log(step, it.steps) {
            let test_function = if cfg.test_function_diagnostics {
                mean_test_function(&theta, &theta_k, &batch, cfg.lambda, schedule)?
            } else {
                None
            };
            observer.record(&MetricRecord::SpinStep {
                iteration,
                step,
                loss: ev.loss,
                lr,
                mean_argument: ev.mean_argument,
                weight_mean: ev.weight_mean,
                weight_max: ev.weight_max,
                guard_events: ev.guard_events,
                test_function,
                cache_id: builder_cache.id.clone(),
                wall_time: cfg.options.record_wall_time.then(|| start.elapsed().as_secs_f64()),
            })?;
        }
        if cfg.options.checkpoint_every > 0 && step % cfg.options.checkpoint_every == 0 && step < it.steps {
            observer.checkpoint(CheckpointTag::Step { iteration: Some(iteration), step }, &theta)?;
        }
    }
    observer.checkpoint(CheckpointTag::Iteration(iteration), &theta)?;
    observer.record(&MetricRecord::IterationEnd { iteration, checkpoint: hex(&theta.checksum()), guard_events })?;
    Ok(SpinIterationState { k: iteration, theta: theta.clone(), theta_k: theta, cache: Some(cache) })
}

fn check_shapes(params: &ScoreModelParams, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if params.arch().data_dim != dataset.dim() || params.arch().conditions != dataset.num_conditions() {
        return Err(Error::config("network shape does not match the dataset"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinOutcome {
    /// Opponents `theta_0..theta_K`; `theta_0` is the starting point.
    pub checkpoints: Vec<ScoreModelParams>,
}

impl SpinOutcome {
    pub fn last(&self) -> &ScoreModelParams {
        self.checkpoints.last().expect("at least the starting point")
    }
}

/// Runs all configured iterations from `init`.
pub fn run_spin(
    init: &ScoreModelParams,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &SpinConfig,
    observer: &mut dyn Observer,
) -> Result<SpinOutcome> {
    observer.checkpoint(CheckpointTag::Init, init)?;
    run_spin_from(SpinIterationState::new(init.clone()), dataset, schedule, cfg, observer)
}

/// Continues from `state` to the last configured iteration. Every random
/// draw of iteration `k` depends only on the seed, `k` and the opponent, so
/// a resumed run reproduces an uninterrupted one exactly.
pub fn run_spin_from(
    mut state: SpinIterationState,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &SpinConfig,
    observer: &mut dyn Observer,
) -> Result<SpinOutcome> {
    cfg.validate(schedule)?;
    if state.k > cfg.iterations.len() {
        return Err(Error::config(format!(
            "state has {} completed iterations, configuration only {}",
            state.k,
            cfg.iterations.len()
        )));
    }
    let mut checkpoints = vec![state.theta_k.clone()];
    while state.k < cfg.iterations.len() {
        state = spin_iteration(state, dataset, schedule, cfg, observer)?;
        checkpoints.push(state.theta_k.clone());
    }
    Ok(SpinOutcome { checkpoints })
}
