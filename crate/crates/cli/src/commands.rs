//! The subcommands. Each one resolves its config, takes the run-directory
//! lock, checks `config.toml` and returns a short text summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use spin_diffusion::data::{self, generate_dataset, Dataset};
use spin_diffusion::diffusion::{reverse_sample_x0, reverse_trajectories};
use spin_diffusion::eval::{evaluate, hex, win_rate, EvalReport, ModelSampler, WinCounts};
use spin_diffusion::metrics::{CheckpointTag, MetricRecord, Observer};
use spin_diffusion::rng::{self, domain};
use spin_diffusion::score_net::{Condition, ScoreModelParams};
use spin_diffusion::trainer::{run_spin, run_spin_from, train_sft, SpinIterationState};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::report::{table, Chart, Point, Series};
use crate::run_dir::{
    iteration_checkpoint, read_checkpoint, reset_file, write_file, write_json, FileObserver, RunDir, CONFIG_FILE,
    DATASET_FILE,
};

pub const SFT_DIR: &str = "sft";
pub const SPIN_DIR: &str = "spin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// A resolved config holding its run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: RunDir,
}

impl Run {
    pub fn open(config: &Path, out_root: &Path) -> CliResult<Self> {
        let cfg = RunConfig::load(config)?.resolve()?;
        Self::with(cfg, &cfg_dir(config, out_root)?)
    }

    /// Reopens a directory from the config recorded in it.
    pub fn reopen(run_dir: &Path) -> CliResult<Self> {
        let cfg = RunConfig::load(&run_dir.join(CONFIG_FILE))?.resolve()?;
        Self::with(cfg, run_dir)
    }

    fn with(cfg: RunConfig, root: &Path) -> CliResult<Self> {
        let dir = RunDir::open(root)?;
        dir.record_config(&cfg)?;
        Ok(Run { cfg, dir })
    }

    fn checkpoints(&self, phase: &str) -> PathBuf {
        self.dir.path(phase).join(CHECKPOINT_DIR)
    }

    fn sft_final(&self) -> PathBuf {
        self.checkpoints(SFT_DIR).join("final.ckpt")
    }

    fn spin_init(&self) -> PathBuf {
        self.cfg.spin_init.clone().unwrap_or_else(|| self.sft_final())
    }

    /// The task dataset: the configured file, the run's cached copy, or a
    /// freshly generated one (which is then cached).
    pub fn dataset(&self) -> CliResult<Dataset> {
        let task = &self.cfg.task;
        if let Some(p) = &task.dataset {
            let ds = data::load(p)?;
            if ds.spec != task.spec {
                return Err(CliError::Config(format!("{} was drawn from a different target", p.display())));
            }
            return Ok(ds);
        }
        let path = self.dir.path(DATASET_FILE);
        if path.exists() {
            let ds = data::load(&path)?;
            if ds.spec != task.spec || ds.seed != task.seed || ds.len() != task.size {
                return Err(CliError::Config(format!("{} does not match the task section", path.display())));
            }
            return Ok(ds);
        }
        let ds = generate_dataset(&task.spec, task.size, &task.labels, task.seed)?;
        data::persist(&ds, &path)?;
        Ok(ds)
    }

    fn init_params(&self) -> CliResult<ScoreModelParams> {
        let arch = self.cfg.model.architecture.clone();
        Ok(ScoreModelParams::init(arch, &mut rng::stream(self.cfg.model.init_seed, domain::INIT, 0))?)
    }

    fn evaluate(&self, params: &ScoreModelParams) -> CliResult<EvalReport> {
        Ok(evaluate(params, &self.cfg.task.spec, self.cfg.schedule(), &self.cfg.eval)?)
    }

    fn win_rate(&self, a: &ScoreModelParams, b: &ScoreModelParams) -> CliResult<WinCounts> {
        let schedule = self.cfg.schedule();
        let w = &self.cfg.win_rate;
        Ok(win_rate(
            &ModelSampler { params: a, schedule },
            &ModelSampler { params: b, schedule },
            &self.cfg.task.spec,
            w.prompts,
            w.best_of,
            w.seed,
        )?)
    }
}

fn cfg_dir(config: &Path, out_root: &Path) -> CliResult<PathBuf> {
    let cfg = RunConfig::load(config)?;
    Ok(cfg.run_dir(out_root))
}

fn fresh_dir(path: &Path) -> CliResult<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| CliError::io(path, e))?;
    }
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn init_config(out: Option<&Path>, name: Option<&str>, force: bool) -> CliResult<String> {
    let mut cfg = RunConfig::default();
    if let Some(n) = name {
        cfg.name = n.into();
    }
    // checked, but written without the derived schedule arrays so that
    // editing `schedule.steps` stays valid
    cfg.clone().resolve()?;
    let text = cfg.emit()?;
    match out {
        None => Ok(text),
        Some(p) => {
            if p.exists() && !force {
                return Err(CliError::Config(format!("{} exists; pass --force to overwrite", p.display())));
            }
            write_file(p, text.as_bytes())?;
            Ok(format!("wrote {}", p.display()))
        }
    }
}

pub fn gen_data(config: &Path, out_root: &Path) -> CliResult<String> {
    let run = Run::open(config, out_root)?;
    let ds = run.dataset()?;
    let counts: Vec<String> = ds.counts().iter().map(usize::to_string).collect();
    Ok(format!(
        "dataset: {} records, per-condition counts [{}], {}",
        ds.len(),
        counts.join(", "),
        run.cfg.task.dataset.clone().unwrap_or_else(|| run.dir.path(DATASET_FILE)).display()
    ))
}

pub fn train_sft_cmd(config: &Path, out_root: &Path) -> CliResult<String> {
    let run = Run::open(config, out_root)?;
    let ds = run.dataset()?;
    let init = run.init_params()?;
    let dir = run.dir.subdir(SFT_DIR)?;
    let metrics = dir.join(METRICS_FILE);
    let ckpts = run.checkpoints(SFT_DIR);
    fresh_dir(&ckpts)?;
    reset_file(&metrics)?;
    let mut obs = FileObserver::create(&metrics, &ckpts, run.cfg.schedule.steps, "init.ckpt")?;
    obs.header("train-sft")?;
    obs.checkpoint(CheckpointTag::Init, &init)?;
    let out = train_sft(&init, &ds, run.cfg.schedule(), &run.cfg.sft, &mut obs)?;
    obs.flush()?;
    let last = out.losses.last().map_or("n/a".to_string(), |l| format!("{l:.5}"));
    Ok(format!(
        "sft: {} steps, final loss {last}, checkpoint {} ({})",
        run.cfg.sft.steps,
        run.sft_final().display(),
        hex(&out.params.checksum())
    ))
}

/// Parsed lines of a metrics file; a torn final line (killed writer) ends
/// the list.
fn metric_lines(path: &Path) -> CliResult<Vec<(String, MetricRecord)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map_while(|l| serde_json::from_str(l).ok().map(|r| (l.to_string(), r)))
        .collect())
}

/// Last iteration with both a checkpoint and a logged end, and the number
/// of metric lines up to that point.
fn resume_point(lines: &[(String, MetricRecord)], ckpts: &Path, total: usize) -> Option<(usize, usize)> {
    if !matches!(lines.first(), Some((_, MetricRecord::Header { .. }))) {
        return None;
    }
    let mut best = iteration_checkpoint(ckpts, 0).exists().then_some((0, 1));
    for (i, (_, r)) in lines.iter().enumerate() {
        if let MetricRecord::IterationEnd { iteration, .. } = r {
            if *iteration <= total && iteration_checkpoint(ckpts, *iteration).exists() {
                best = Some((*iteration, i + 1));
            }
        }
    }
    best
}

pub fn train_spin_cmd(config: &Path, out_root: &Path, resume: bool) -> CliResult<String> {
    let run = Run::open(config, out_root)?;
    let init_path = run.spin_init();
    if !init_path.exists() {
        return Err(CliError::Config(format!(
            "self-play start {} does not exist; run train-sft first or set spin_init",
            init_path.display()
        )));
    }
    let init = read_checkpoint(&init_path, &run.cfg)?;
    let ds = run.dataset()?;
    let dir = run.dir.subdir(SPIN_DIR)?;
    let metrics = dir.join(METRICS_FILE);
    let ckpts = run.checkpoints(SPIN_DIR);
    let total = run.cfg.spin.iterations.len();
    let steps = run.cfg.schedule.steps;

    let done = if resume { resume_point(&metric_lines(&metrics)?, &ckpts, total) } else { None };
    let outcome = match done {
        Some((k, keep)) => {
            let start = read_checkpoint(&iteration_checkpoint(&ckpts, 0), &run.cfg)?;
            if start.checksum() != init.checksum() {
                return Err(CliError::Config(format!(
                    "{} no longer matches the recorded starting point; rerun without --resume",
                    init_path.display()
                )));
            }
            let params = read_checkpoint(&iteration_checkpoint(&ckpts, k), &run.cfg)?;
            let kept: String = metric_lines(&metrics)?[..keep].iter().map(|(l, _)| format!("{l}\n")).collect();
            write_file(&metrics, kept.as_bytes())?;
            let mut obs = FileObserver::create(&metrics, &ckpts, steps, "iter-0.ckpt")?;
            let out =
                run_spin_from(SpinIterationState::resume(k, params), &ds, run.cfg.schedule(), &run.cfg.spin, &mut obs)?;
            obs.flush()?;
            (k, out)
        }
        None => {
            fresh_dir(&ckpts)?;
            reset_file(&metrics)?;
            let mut obs = FileObserver::create(&metrics, &ckpts, steps, "iter-0.ckpt")?;
            obs.header("train-spin")?;
            let out = run_spin(&init, &ds, run.cfg.schedule(), &run.cfg.spin, &mut obs)?;
            obs.flush()?;
            (0, out)
        }
    };
    let (from, out) = outcome;
    let resumed = if resume { format!(" (resumed after iteration {from})") } else { String::new() };
    Ok(format!(
        "spin: {total} iterations{resumed}, final checkpoint {} ({})",
        iteration_checkpoint(&ckpts, total).display(),
        hex(&out.last().checksum())
    ))
}

#[derive(Serialize)]
struct SampleFile {
    schema_version: u32,
    checkpoint: String,
    condition: usize,
    seed: u64,
    samples: Vec<Vec<f64>>,
    /// `trajectories[i][t]` is `x_t` of chain `i`.
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectories: Option<Vec<Vec<Vec<f64>>>>,
}

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub n: usize,
    pub condition: usize,
    pub seed: Option<u64>,
    pub trajectories: bool,
    pub out: Option<&'a Path>,
}

pub fn sample(config: &Path, out_root: &Path, args: &SampleArgs<'_>) -> CliResult<String> {
    let run = Run::open(config, out_root)?;
    let params = read_checkpoint(args.checkpoint, &run.cfg)?;
    let count = run.cfg.model.architecture.conditions;
    let condition = Condition::new(args.condition, count).map_err(|e| CliError::Config(e.to_string()))?;
    if args.n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let seed = args.seed.unwrap_or(run.cfg.eval.seed);
    let schedule = run.cfg.schedule();
    let (samples, trajectories) = if args.trajectories {
        let trajs = reverse_trajectories(&params, &vec![condition; args.n], schedule, seed, domain::EVAL_MODEL)?;
        let states: Vec<Vec<Vec<f64>>> = trajs.into_iter().map(|t| t.states).collect();
        (states.iter().map(|s| s[0].clone()).collect(), Some(states))
    } else {
        (reverse_sample_x0(&params, &vec![args.condition; args.n], schedule, seed, domain::EVAL_MODEL)?, None)
    };
    let file = SampleFile {
        schema_version: SCHEMA_VERSION,
        checkpoint: hex(&params.checksum()),
        condition: args.condition,
        seed,
        samples,
        trajectories,
    };
    let path = match args.out {
        Some(p) => p.to_path_buf(),
        None => run.dir.subdir("samples")?.join(format!(
            "{}-c{}-n{}-s{seed}.json",
            artifact_name(args.checkpoint),
            args.condition,
            args.n
        )),
    };
    write_json(&path, &file)?;
    Ok(format!("wrote {} samples to {}", args.n, path.display()))
}

/// `spin/checkpoints/iter-2.ckpt` becomes `spin-iter-2`.
fn artifact_name(checkpoint: &Path) -> String {
    let stem = checkpoint.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    let parent = checkpoint.parent();
    match parent.and_then(|p| p.file_name()) {
        Some(d) if d == CHECKPOINT_DIR => match parent.and_then(Path::parent).and_then(|p| p.file_name()) {
            Some(phase) => format!("{}-{stem}", phase.to_string_lossy()),
            None => stem,
        },
        _ => stem,
    }
}

#[derive(Serialize)]
struct Versus {
    checkpoint: String,
    counts: WinCounts,
    rate: f64,
}

#[derive(Serialize)]
struct EvalFile {
    schema_version: u32,
    checkpoint: String,
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    versus: Option<Versus>,
}

pub fn eval_cmd(config: &Path, out_root: &Path, checkpoints: &[PathBuf], versus: Option<&Path>) -> CliResult<String> {
    let run = Run::open(config, out_root)?;
    let other = versus.map(|p| read_checkpoint(p, &run.cfg)).transpose()?;
    let dir = run.dir.subdir("eval")?;
    let mut rows = Vec::new();
    for path in checkpoints {
        let params = read_checkpoint(path, &run.cfg)?;
        let report = run.evaluate(&params)?;
        let versus = match (&other, versus) {
            (Some(b), Some(bp)) => {
                let counts = run.win_rate(&params, b)?;
                Some(Versus { checkpoint: bp.display().to_string(), counts, rate: counts.rate() })
            }
            _ => None,
        };
        let name = artifact_name(path);
        rows.push(vec![
            name.clone(),
            pm(report.aggregate.energy_distance, report.aggregate.energy_distance_se),
            pm(report.aggregate.mean_logpdf, report.aggregate.mean_logpdf_se),
            versus.as_ref().map_or("-".into(), |v| format!("{:.3}", v.rate)),
        ]);
        let file =
            EvalFile { schema_version: SCHEMA_VERSION, checkpoint: path.display().to_string(), report, versus };
        write_json(&dir.join(format!("{name}.json")), &file)?;
    }
    Ok(table(&["checkpoint", "energy distance", "mean log-density", "win rate"], &rows))
}

fn pm(v: f64, se: f64) -> String {
    format!("{v:.4} ± {se:.4}")
}

/// One evaluated checkpoint of the report.
#[derive(Debug, Clone, Serialize)]
struct ReportPoint {
    label: String,
    iteration: Option<usize>,
    samples_seen: usize,
    checkpoint: String,
    energy_distance: f64,
    energy_distance_se: f64,
    mean_logpdf: f64,
    mean_logpdf_se: f64,
    dsm_excess: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    win_rate_vs_base: Option<f64>,
}

#[derive(Serialize)]
struct ReportFile {
    schema_version: u32,
    run: String,
    iterations: Vec<ReportPoint>,
    sft_dynamics: Vec<ReportPoint>,
    spin_dynamics: Vec<ReportPoint>,
}

/// Parses `step-NNNNNN.ckpt` (`None` phase) or `iter-k-step-NNNNNN.ckpt`.
fn parse_step_name(name: &str) -> Option<(Option<usize>, usize)> {
    let stem = name.strip_suffix(".ckpt")?;
    if let Some(s) = stem.strip_prefix("step-") {
        return Some((None, s.parse().ok()?));
    }
    let rest = stem.strip_prefix("iter-")?;
    let (k, s) = rest.split_once("-step-")?;
    Some((Some(k.parse().ok()?), s.parse().ok()?))
}

fn step_checkpoints(dir: &Path) -> CliResult<Vec<(Option<usize>, usize, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        if let Some((k, s)) = parse_step_name(&entry.file_name().to_string_lossy()) {
            out.push((k, s, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

struct Evaluator<'a> {
    run: &'a Run,
    cache: BTreeMap<String, EvalReport>,
}

impl Evaluator<'_> {
    fn point(
        &mut self,
        label: String,
        iteration: Option<usize>,
        samples_seen: usize,
        params: &ScoreModelParams,
    ) -> CliResult<ReportPoint> {
        let id = hex(&params.checksum());
        let report = match self.cache.get(&id) {
            Some(r) => r.clone(),
            None => {
                let r = self.run.evaluate(params)?;
                self.cache.insert(id.clone(), r.clone());
                r
            }
        };
        let a = &report.aggregate;
        Ok(ReportPoint {
            label,
            iteration,
            samples_seen,
            checkpoint: id,
            energy_distance: a.energy_distance,
            energy_distance_se: a.energy_distance_se,
            mean_logpdf: a.mean_logpdf,
            mean_logpdf_se: a.mean_logpdf_se,
            dsm_excess: a.dsm_excess,
            win_rate_vs_base: None,
        })
    }
}

fn series(name: &str, points: &[ReportPoint], x: impl Fn(&ReportPoint) -> f64, y: impl Fn(&ReportPoint) -> (f64, Option<f64>)) -> Series {
    Series {
        name: name.into(),
        points: points
            .iter()
            .map(|p| {
                let (y, err) = y(p);
                Point { x: x(p), y, err }
            })
            .collect(),
    }
}

fn ed(p: &ReportPoint) -> (f64, Option<f64>) {
    (p.energy_distance, Some(2.0 * p.energy_distance_se))
}

fn logpdf(p: &ReportPoint) -> (f64, Option<f64>) {
    (p.mean_logpdf, Some(2.0 * p.mean_logpdf_se))
}

/// Evaluates every self-play iteration checkpoint and the training
/// trajectories, then writes JSON, SVG charts and a text summary into
/// `<run>/report`.
pub fn report_cmd(run_dir: &Path) -> CliResult<String> {
    let run = Run::reopen(run_dir)?;
    let cfg = &run.cfg;
    let ckpts = run.checkpoints(SPIN_DIR);
    let total = cfg.spin.iterations.len();
    for k in 0..=total {
        if !iteration_checkpoint(&ckpts, k).exists() {
            return Err(CliError::Config(format!(
                "{} is missing; run train-spin to completion first",
                iteration_checkpoint(&ckpts, k).display()
            )));
        }
    }
    let sft_batch = cfg.sft.options.batch_size;
    let spin_batch = cfg.spin.options.batch_size;
    let base_seen = if cfg.spin_init.is_none() { cfg.sft.steps * sft_batch } else { 0 };
    let mut offsets = vec![0usize];
    for it in &cfg.spin.iterations {
        offsets.push(offsets.last().unwrap() + it.steps);
    }
    let mut ev = Evaluator { run: &run, cache: BTreeMap::new() };

    let base = read_checkpoint(&iteration_checkpoint(&ckpts, 0), cfg)?;
    let mut iterations = Vec::with_capacity(total + 1);
    for k in 0..=total {
        let params = read_checkpoint(&iteration_checkpoint(&ckpts, k), cfg)?;
        let mut p = ev.point(format!("iter-{k}"), Some(k), base_seen + offsets[k] * spin_batch, &params)?;
        if k > 0 {
            p.win_rate_vs_base = Some(run.win_rate(&params, &base)?.rate());
        }
        iterations.push(p);
    }

    let mut sft_dynamics = Vec::new();
    let sft_ckpts = run.checkpoints(SFT_DIR);
    if cfg.spin_init.is_none() && sft_ckpts.join("init.ckpt").exists() {
        let init = read_checkpoint(&sft_ckpts.join("init.ckpt"), cfg)?;
        sft_dynamics.push(ev.point("sft-init".into(), None, 0, &init)?);
        for (_, s, path) in step_checkpoints(&sft_ckpts)? {
            let params = read_checkpoint(&path, cfg)?;
            sft_dynamics.push(ev.point(format!("sft-step-{s}"), None, s * sft_batch, &params)?);
        }
        if run.sft_final().exists() && sft_dynamics.last().map(|p| p.samples_seen) != Some(base_seen) {
            let params = read_checkpoint(&run.sft_final(), cfg)?;
            sft_dynamics.push(ev.point("sft-final".into(), None, base_seen, &params)?);
        }
    }

    let mut spin_dynamics = vec![iterations[0].clone()];
    let mut steps = step_checkpoints(&ckpts)?;
    steps.retain(|(k, s, _)| matches!(k, Some(k) if (1..=total).contains(k) && *s <= cfg.spin.iterations[*k - 1].steps));
    let mut expected: Vec<(usize, usize)> = steps.iter().map(|(k, s, _)| (k.unwrap_or(0), *s)).collect();
    for k in 1..=total {
        expected.push((k, cfg.spin.iterations[k - 1].steps));
    }
    expected.sort();
    expected.dedup();
    for (k, s) in expected {
        let path = if s == cfg.spin.iterations[k - 1].steps {
            iteration_checkpoint(&ckpts, k)
        } else {
            ckpts.join(format!("iter-{k}-step-{s:06}.ckpt"))
        };
        let params = read_checkpoint(&path, cfg)?;
        let seen = base_seen + (offsets[k - 1] + s) * spin_batch;
        spin_dynamics.push(ev.point(format!("iter-{k}-step-{s}"), Some(k), seen, &params)?);
    }

    let out = run.dir.subdir("report")?;
    let by_iter = |p: &ReportPoint| p.iteration.unwrap_or(0) as f64;
    let seen = |p: &ReportPoint| p.samples_seen as f64;
    let charts = [
        (
            "energy_distance.svg",
            Chart {
                title: "Energy distance to the target by self-play iteration".into(),
                x_label: "iteration".into(),
                y_label: "energy distance (lower is better)".into(),
                series: vec![series("spin", &iterations, by_iter, ed)],
                reference: None,
            },
        ),
        (
            "mean_logpdf.svg",
            Chart {
                title: "Mean target log-density by self-play iteration".into(),
                x_label: "iteration".into(),
                y_label: "mean log-density (higher is better)".into(),
                series: vec![series("spin", &iterations, by_iter, logpdf)],
                reference: None,
            },
        ),
        (
            "win_rate.svg",
            Chart {
                title: "Win rate against the starting checkpoint".into(),
                x_label: "iteration".into(),
                y_label: "win rate".into(),
                series: vec![series("spin", &iterations[1..], by_iter, |p| (p.win_rate_vs_base.unwrap_or(0.5), None))],
                reference: Some(0.5),
            },
        ),
        (
            "training_dynamics.svg",
            Chart {
                title: "Energy distance against training samples seen".into(),
                x_label: "training samples seen".into(),
                y_label: "energy distance".into(),
                series: [("sft", &sft_dynamics), ("spin", &spin_dynamics)]
                    .into_iter()
                    .filter(|(_, pts)| !pts.is_empty())
                    .map(|(n, pts)| series(n, pts, seen, ed))
                    .collect(),
                reference: None,
            },
        ),
    ];
    for (name, chart) in &charts {
        write_file(&out.join(name), chart.render().as_bytes())?;
    }

    let rows: Vec<Vec<String>> = iterations
        .iter()
        .map(|p| {
            vec![
                p.label.clone(),
                pm(p.energy_distance, p.energy_distance_se),
                pm(p.mean_logpdf, p.mean_logpdf_se),
                p.dsm_excess.map_or("-".into(), |d| format!("{d:.5}")),
                p.win_rate_vs_base.map_or("-".into(), |w| format!("{w:.3}")),
            ]
        })
        .collect();
    let summary = format!(
        "run {}: {} self-play iterations, eval n = {} per condition, win rate on {} prompts (best of {})\n\n{}",
        cfg.name,
        total,
        cfg.eval.n_samples,
        cfg.win_rate.prompts,
        cfg.win_rate.best_of,
        table(&["checkpoint", "energy distance", "mean log-density", "dsm excess", "win rate vs iter-0"], &rows)
    );
    write_file(&out.join("summary.txt"), summary.as_bytes())?;
    let file = ReportFile {
        schema_version: SCHEMA_VERSION,
        run: cfg.name.clone(),
        iterations,
        sft_dynamics,
        spin_dynamics,
    };
    write_json(&out.join("report.json"), &file)?;
    Ok(summary)
}
