//! Supervised fine-tuning: minibatch denoising score matching on the dataset.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DivergenceGuard, LoopOptions, OptimizerConfig, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{dsm_graph, NoisedSample};
use crate::metrics::{CheckpointTag, MetricRecord, Observer};
use crate::rng::{self, domain};
use crate::schedule::NoiseSchedule;
use crate::score_net::{grad_loss, Condition, ScoreModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub options: LoopOptions,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub params: ScoreModelParams,
    pub losses: Vec<f64>,
}

/// Minibatch `step` (1-based): records drawn with replacement, one `t` and
/// noise vector each, all from one stream.
pub(crate) fn dsm_batch(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<NoisedSample>> {
    let mut r = rng::stream(seed, domain::BATCH, step);
    let c = dataset.num_conditions();
    (0..batch_size)
        .map(|_| {
            let rec = &dataset.records[r.random_range(0..dataset.len())];
            let t = r.random_range(1..=schedule.steps());
            let eps = rng::standard_normal(&mut r, dataset.dim());
            NoisedSample::new(&rec.x0, Condition::new(rec.label, c)?, eps, t, schedule)
        })
        .collect()
}

pub fn train_sft(
    init: &ScoreModelParams,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &SftConfig,
    observer: &mut dyn Observer,
) -> Result<SftOutcome> {
    cfg.options.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if init.arch().data_dim != dataset.dim() || init.arch().conditions != dataset.num_conditions() {
        return Err(Error::config("network shape does not match the dataset"));
    }
    let mut params = init.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, params.len(), cfg.steps)?;
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    for step in 1..=cfg.steps {
        let batch = dsm_batch(dataset, schedule, cfg.options.batch_size, cfg.seed, step as u64)?;
        let (loss, grad) = grad_loss(&params, |g| dsm_graph(g, &batch, schedule))?;
        guard.observe(step, loss)?;
        let lr = opt.update(&mut params, &grad)?;
        losses.push(loss);
        if cfg.options.should_log(step, cfg.steps) {
            let wall_time = cfg.options.record_wall_time.then(|| start.elapsed().as_secs_f64());
            observer.record(&MetricRecord::SftStep { step, loss, lr, wall_time })?;
        }
        if cfg.options.checkpoint_every > 0 && step % cfg.options.checkpoint_every == 0 && step < cfg.steps {
            observer.checkpoint(CheckpointTag::Step { iteration: None, step }, &params)?;
        }
    }
    observer.checkpoint(CheckpointTag::SftFinal, &params)?;
    Ok(SftOutcome { params, losses })
}
