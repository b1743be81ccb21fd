//! Run configuration: one TOML file describing the task, model, training
//! and evaluation of an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spin_diffusion::data::{ConditionDistribution, TargetSpec};
use spin_diffusion::eval::EvalConfig;
use spin_diffusion::schedule::{make_schedule, NoiseSchedule, ScheduleShape};
use spin_diffusion::score_net::Architecture;
use spin_diffusion::trainer::{IterationConfig, LoopOptions, OptimizerConfig, SftConfig, SpinConfig};

use crate::error::{CliError, CliResult};

/// Bumped whenever a field changes meaning. Written into every artifact.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Run name; the run directory is `<output root>/<name>` unless
    /// `output_dir` is set.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Self-play starting checkpoint; defaults to the run's supervised
    /// final checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spin_init: Option<PathBuf>,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub spin: SpinConfig,
    pub eval: EvalConfig,
    pub win_rate: WinRateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Existing dataset file; when absent the dataset is generated from `spec`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub size: usize,
    pub labels: ConditionDistribution,
    pub seed: u64,
    pub spec: TargetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub shape: ScheduleShape,
    pub eta: f64,
    /// Explicit arrays; filled in when the config is resolved and
    /// authoritative from then on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrays: Option<NoiseSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WinRateConfig {
    pub prompts: usize,
    pub best_of: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = TargetSpec::default_task();
        let conditions = spec.num_conditions();
        let data_dim = spec.dim;
        let iteration = IterationConfig { steps: 1000, lr: 1e-3, beta_scale: 2.0 };
        RunConfig {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            output_dir: None,
            task: TaskConfig { dataset: None, size: 4096, labels: ConditionDistribution::Uniform, seed: 0, spec },
            schedule: ScheduleConfig { steps: 10, shape: ScheduleShape::Cosine, eta: 1.0, arrays: None },
            model: ModelConfig {
                architecture: Architecture { hidden: vec![16, 16], ..Architecture::new(data_dim, conditions) },
                init_seed: 0,
            },
            sft: SftConfig {
                steps: 1000,
                optimizer: OptimizerConfig::default(),
                options: LoopOptions::default(),
                seed: 0,
            },
            spin_init: None,
            spin: SpinConfig::new(vec![iteration; 3], 1),
            eval: EvalConfig { n_samples: 1000, bootstrap: 50, seed: 7 },
            win_rate: WinRateConfig { prompts: 1000, best_of: 1, seed: 3 },
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn emit(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Builds the schedule, fills in `schedule.arrays` and checks every
    /// section.
    pub fn resolve(mut self) -> CliResult<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!("invalid run name {:?}", self.name)));
        }
        let schedule = match self.schedule.arrays.take() {
            Some(s) => s,
            None => make_schedule(self.schedule.steps, self.schedule.shape, self.schedule.eta)?,
        };
        if schedule.steps() != self.schedule.steps {
            return Err(CliError::Config(format!(
                "schedule arrays have {} steps, schedule.steps is {}",
                schedule.steps(),
                self.schedule.steps
            )));
        }
        self.schedule.arrays = Some(schedule);
        let schedule = self.schedule();
        self.task.spec.validate()?;
        if self.task.size == 0 {
            return Err(CliError::Config("task.size must be positive".into()));
        }
        for p in self.task.dataset.iter().chain(&self.spin_init) {
            if !p.exists() {
                return Err(CliError::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        let arch = &self.model.architecture;
        arch.validate()?;
        if arch.data_dim != self.task.spec.dim || arch.conditions != self.task.spec.num_conditions() {
            return Err(CliError::Config("model shape does not match the task".into()));
        }
        self.sft.options.validate()?;
        self.sft.optimizer.validate()?;
        self.spin.validate(schedule)?;
        if self.eval.n_samples < 100 || self.win_rate.prompts < 100 || self.win_rate.best_of == 0 {
            return Err(CliError::Config(
                "need eval.n_samples >= 100, win_rate.prompts >= 100 and win_rate.best_of >= 1".into(),
            ));
        }
        Ok(self)
    }

    /// Schedule of a resolved config.
    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule.arrays.as_ref().expect("config is resolved")
    }

    pub fn run_dir(&self, output_root: &Path) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| output_root.join(&self.name))
    }
}
