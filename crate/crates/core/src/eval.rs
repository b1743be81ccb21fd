//! Model quality against the known target: energy distance, target
//! log-likelihood of generated samples, excess noise-prediction risk, and
//! paired win rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TargetSpec;
use crate::diffusion::reverse_sample_x0;
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::schedule::NoiseSchedule;
use crate::score_net::{eval_scores, ScoreModelParams, ScoreQuery};

/// Anything that turns `(condition, stream)` into an `x_0` sample.
pub trait Sampler: Sync {
    /// Sample `i` must depend only on `(conditions[i], seed, domain, i)`.
    fn sample_x0(&self, conditions: &[usize], seed: u64, domain: u64) -> Result<Vec<Vec<f64>>>;
}

pub struct ModelSampler<'a> {
    pub params: &'a ScoreModelParams,
    pub schedule: &'a NoiseSchedule,
}

impl Sampler for ModelSampler<'_> {
    fn sample_x0(&self, conditions: &[usize], seed: u64, domain: u64) -> Result<Vec<Vec<f64>>> {
        reverse_sample_x0(self.params, conditions, self.schedule, seed, domain)
    }
}

/// Draws straight from the target; the reference "perfect model".
pub struct TargetSampler<'a> {
    pub spec: &'a TargetSpec,
}

impl Sampler for TargetSampler<'_> {
    fn sample_x0(&self, conditions: &[usize], seed: u64, domain: u64) -> Result<Vec<Vec<f64>>> {
        conditions
            .par_iter()
            .enumerate()
            .map(|(i, &c)| self.spec.sample(c, &mut rng::stream(seed, domain, i as u64)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per condition.
    pub n_samples: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_samples: 1000, bootstrap: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub energy_distance: f64,
    pub energy_distance_se: f64,
    pub mean_logpdf: f64,
    pub mean_logpdf_se: f64,
    pub dsm_excess: Option<f64>,
    pub dsm_excess_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_condition: Vec<ConditionReport>,
    pub aggregate: Metrics,
    pub n_samples: usize,
    pub seed: u64,
    /// Hex SHA-256 of the evaluated parameters, when a network was evaluated.
    pub checkpoint: Option<String>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Unbiased two-sample energy distance from index lists into `x` and `y`.
fn energy_from(dxy: &[f64], dxx: &[f64], dyy: &[f64], n: usize, m: usize, ix: &[usize], iy: &[usize]) -> f64 {
    let mut cross = 0.0;
    for &i in ix {
        for &j in iy {
            cross += dxy[i * m + j];
        }
    }
    let within = |d: &[f64], idx: &[usize], size: usize| {
        let mut s = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                s += d[i * size + j];
            }
        }
        2.0 * s / (idx.len() * (idx.len() - 1)) as f64
    };
    2.0 * cross / (ix.len() * iy.len()) as f64 - within(dxx, ix, n) - within(dyy, iy, m)
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` (U-statistic) and a
/// bootstrap standard error.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>], bootstrap: usize, seed: u64) -> Result<(f64, f64)> {
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(Error::config("energy distance needs at least two samples per side"));
    }
    let pairwise = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<f64> {
        a.par_iter().flat_map_iter(|p| b.iter().map(move |q| dist(p, q))).collect()
    };
    let (dxy, dxx, dyy) = (pairwise(x, y), pairwise(x, x), pairwise(y, y));
    let ix: Vec<usize> = (0..n).collect();
    let iy: Vec<usize> = (0..m).collect();
    let value = energy_from(&dxy, &dxx, &dyy, n, m, &ix, &iy);
    if bootstrap < 2 {
        return Ok((value, f64::NAN));
    }
    let reps: Vec<f64> = (0..bootstrap)
        .into_par_iter()
        .map(|b| {
            use rand::Rng as _;
            let mut r = rng::stream(seed, domain::BOOTSTRAP, b as u64);
            let bx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let by: Vec<usize> = (0..m).map(|_| r.random_range(0..m)).collect();
            energy_from(&dxy, &dxx, &dyy, n, m, &bx, &by)
        })
        .collect();
    let mean = reps.iter().sum::<f64>() / bootstrap as f64;
    let var = reps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bootstrap - 1) as f64;
    Ok((value, var.sqrt()))
}

/// Paired excess risk `gamma_t (||eps_theta - eps||^2 - ||eps* - eps||^2)`
/// on fresh target data, `eps*` the exact conditional mean of the noise.
pub fn dsm_excess(
    params: &ScoreModelParams,
    spec: &TargetSpec,
    schedule: &NoiseSchedule,
    condition: usize,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::Rng as _;
    let steps = schedule.steps();
    let draws = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, domain::EVAL_DSM, (condition * n + i) as u64);
            let x0 = spec.sample(condition, &mut r)?;
            let t = r.random_range(1..=steps);
            let eps = rng::standard_normal(&mut r, spec.dim);
            let a = schedule.alpha(t);
            let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e).collect();
            Ok((x_t, eps, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let queries: Vec<ScoreQuery<'_>> = draws.iter().map(|(x, _, t)| ScoreQuery { x, condition, t: *t }).collect();
    let pred = eval_scores(params, &queries, steps)?;
    let excess = draws
        .iter()
        .enumerate()
        .map(|(i, (x_t, eps, t))| {
            let opt = spec.optimal_eps(condition, x_t, schedule.alpha(*t))?;
            let sq = |p: &[f64]| p.iter().zip(eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            Ok(schedule.gamma(*t) * (sq(pred.row(i)) - sq(&opt)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_se(&excess))
}

/// Energy distance and target log-likelihood of any sampler.
pub fn evaluate_sampler(sampler: &dyn Sampler, spec: &TargetSpec, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.n_samples < 100 {
        return Err(Error::config(format!("evaluation needs at least 100 samples, got {}", cfg.n_samples)));
    }
    let n = cfg.n_samples;
    let c = spec.num_conditions();
    let labels: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, n)).collect();
    let generated = sampler.sample_x0(&labels, cfg.seed, domain::EVAL_MODEL)?;
    let reference = TargetSampler { spec }.sample_x0(&labels, cfg.seed, domain::EVAL_TARGET)?;
    let mut per_condition = Vec::with_capacity(c);
    for k in 0..c {
        let gen = &generated[k * n..(k + 1) * n];
        let refs = &reference[k * n..(k + 1) * n];
        let (ed, ed_se) = energy_distance(gen, refs, cfg.bootstrap, cfg.seed ^ ((k as u64) << 32))?;
        let lp = gen.iter().map(|x| spec.logpdf(k, x)).collect::<Result<Vec<_>>>()?;
        let (mean_logpdf, mean_logpdf_se) = mean_se(&lp);
        per_condition.push(ConditionReport {
            condition: k,
            metrics: Metrics {
                energy_distance: ed,
                energy_distance_se: ed_se,
                mean_logpdf,
                mean_logpdf_se,
                dsm_excess: None,
                dsm_excess_se: None,
            },
        });
    }
    let avg = |f: &dyn Fn(&Metrics) -> f64| per_condition.iter().map(|r| f(&r.metrics)).sum::<f64>() / c as f64;
    let pooled = |f: &dyn Fn(&Metrics) -> f64| {
        (per_condition.iter().map(|r| f(&r.metrics).powi(2)).sum::<f64>()).sqrt() / c as f64
    };
    let aggregate = Metrics {
        energy_distance: avg(&|m| m.energy_distance),
        energy_distance_se: pooled(&|m| m.energy_distance_se),
        mean_logpdf: avg(&|m| m.mean_logpdf),
        mean_logpdf_se: pooled(&|m| m.mean_logpdf_se),
        dsm_excess: None,
        dsm_excess_se: None,
    };
    let report = EvalReport { per_condition, aggregate, n_samples: n, seed: cfg.seed, checkpoint: None };
    check_finite(&report)?;
    Ok(report)
}

fn check_finite(r: &EvalReport) -> Result<()> {
    let ok = |m: &Metrics| {
        m.energy_distance.is_finite() && m.mean_logpdf.is_finite() && m.dsm_excess.is_none_or(f64::is_finite)
    };
    if r.per_condition.iter().all(|c| ok(&c.metrics)) && ok(&r.aggregate) {
        Ok(())
    } else {
        Err(Error::NonFinite("evaluation metric".into()))
    }
}

/// Full report for a network, including excess noise-prediction risk.
pub fn evaluate(
    params: &ScoreModelParams,
    spec: &TargetSpec,
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut report = evaluate_sampler(&ModelSampler { params, schedule }, spec, cfg)?;
    let c = spec.num_conditions();
    let mut ex = Vec::with_capacity(c);
    for r in &mut report.per_condition {
        let (m, se) = dsm_excess(params, spec, schedule, r.condition, cfg.n_samples, cfg.seed)?;
        r.metrics.dsm_excess = Some(m);
        r.metrics.dsm_excess_se = Some(se);
        ex.push((m, se));
    }
    report.aggregate.dsm_excess = Some(ex.iter().map(|e| e.0).sum::<f64>() / c as f64);
    report.aggregate.dsm_excess_se = Some(ex.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt() / c as f64);
    report.checkpoint = Some(hex(&params.checksum()));
    check_finite(&report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCounts {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinCounts {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    /// Win fraction with ties counted as half.
    pub fn rate(&self) -> f64 {
        (2 * self.wins + self.ties) as f64 / (2 * self.total()) as f64
    }

    pub fn swapped(&self) -> WinCounts {
        WinCounts { wins: self.losses, ties: self.ties, losses: self.wins }
    }
}

fn best_scores(sampler: &dyn Sampler, spec: &TargetSpec, labels: &[usize], best_of: usize, seed: u64) -> Result<Vec<f64>> {
    let expanded: Vec<usize> = labels.iter().flat_map(|&c| std::iter::repeat_n(c, best_of)).collect();
    let samples = sampler.sample_x0(&expanded, seed, domain::WIN_RATE)?;
    let scores = samples
        .iter()
        .zip(&expanded)
        .map(|(x, &c)| spec.logpdf(c, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.chunks(best_of).map(|ch| ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect())
}

/// Prompt `i` has condition `i mod C`; both samplers draw it from the same
/// stream, so two networks start from the same `x_T`. Quality is the target
/// log-density of the sample (the best of `best_of` when greater than one).
pub fn win_rate(
    a: &dyn Sampler,
    b: &dyn Sampler,
    spec: &TargetSpec,
    n_prompts: usize,
    best_of: usize,
    seed: u64,
) -> Result<WinCounts> {
    if n_prompts < 100 {
        return Err(Error::config(format!("win rate needs at least 100 prompts, got {n_prompts}")));
    }
    if best_of == 0 {
        return Err(Error::config("best_of must be at least 1"));
    }
    let labels: Vec<usize> = (0..n_prompts).map(|i| i % spec.num_conditions()).collect();
    let sa = best_scores(a, spec, &labels, best_of, seed)?;
    let sb = best_scores(b, spec, &labels, best_of, seed)?;
    let mut counts = WinCounts { wins: 0, ties: 0, losses: 0 };
    for (x, y) in sa.iter().zip(&sb) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => counts.wins += 1,
            Some(std::cmp::Ordering::Less) => counts.losses += 1,
            _ => counts.ties += 1,
        }
    }
    Ok(counts)
}
