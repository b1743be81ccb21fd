//! Run directory layout, the per-directory lock and the observer that
//! turns trainer callbacks into files.

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use spin_diffusion::metrics::{CheckpointTag, JsonlWriter, MetricRecord, Observer};
use spin_diffusion::score_net::{checkpoint, ScoreModelParams};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const DATASET_FILE: &str = "dataset.spd";

/// Exclusive handle on a run directory; removed on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `root` if needed and takes its lock.
    pub fn open(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&lock, e))?;
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(CliError::io(
                    &lock,
                    std::io::Error::new(
                        ErrorKind::AlreadyExists,
                        "run directory is in use by another process (delete the lock file if that process is gone)",
                    ),
                ))
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        Ok(RunDir { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// Writes the resolved config, or checks it against the one already
    /// recorded for this directory.
    pub fn record_config(&self, cfg: &RunConfig) -> CliResult<()> {
        let path = self.path(CONFIG_FILE);
        let text = cfg.emit()?;
        match fs::read_to_string(&path) {
            Ok(existing) if existing == text => Ok(()),
            Ok(_) => Err(CliError::Config(format!(
                "{} was written by a different configuration; use a new run directory",
                path.display()
            ))),
            Err(e) if e.kind() == ErrorKind::NotFound => write_file(&path, text.as_bytes()),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// File name of a checkpoint.
pub fn checkpoint_name(tag: CheckpointTag) -> String {
    match tag {
        CheckpointTag::Init => "init.ckpt".into(),
        CheckpointTag::Step { iteration: None, step } => format!("step-{step:06}.ckpt"),
        CheckpointTag::Step { iteration: Some(k), step } => format!("iter-{k}-step-{step:06}.ckpt"),
        CheckpointTag::SftFinal => "final.ckpt".into(),
        CheckpointTag::Iteration(k) => format!("iter-{k}.ckpt"),
    }
}

/// Path of iteration checkpoint `k` (`k = 0` is the starting point).
pub fn iteration_checkpoint(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("iter-{k}.ckpt"))
}

/// Writes records to a metrics file and checkpoints into a directory.
pub struct FileObserver {
    metrics: JsonlWriter,
    checkpoints: PathBuf,
    steps: usize,
    /// File name used for [`CheckpointTag::Init`].
    init_name: String,
}

impl FileObserver {
    /// `steps` is the schedule length stored in each checkpoint.
    pub fn create(metrics: &Path, checkpoints: &Path, steps: usize, init_name: &str) -> CliResult<Self> {
        fs::create_dir_all(checkpoints).map_err(|e| CliError::io(checkpoints, e))?;
        Ok(FileObserver {
            metrics: JsonlWriter::append(metrics)?,
            checkpoints: checkpoints.to_path_buf(),
            steps,
            init_name: init_name.into(),
        })
    }

    pub fn header(&mut self, command: &str) -> CliResult<()> {
        self.record(&MetricRecord::Header { schema_version: SCHEMA_VERSION, command: command.into() })?;
        Ok(())
    }

    pub fn flush(&mut self) -> CliResult<()> {
        Ok(self.metrics.flush()?)
    }
}

impl Observer for FileObserver {
    fn record(&mut self, record: &MetricRecord) -> spin_diffusion::Result<()> {
        self.metrics.write(record)?;
        // iteration boundaries are the resume points, make them durable
        if matches!(record, MetricRecord::IterationEnd { .. } | MetricRecord::Header { .. }) {
            self.metrics.flush()?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, tag: CheckpointTag, params: &ScoreModelParams) -> spin_diffusion::Result<()> {
        let name = match tag {
            CheckpointTag::Init => self.init_name.clone(),
            t => checkpoint_name(t),
        };
        // write then rename, so a killed run never leaves a torn checkpoint
        let tmp = self.checkpoints.join(format!(".{name}.tmp"));
        checkpoint::save(&tmp, params, self.steps)?;
        fs::rename(&tmp, self.checkpoints.join(&name))?;
        self.metrics.flush()?;
        Ok(())
    }
}

pub fn read_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<ScoreModelParams> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = checkpoint::load(path)?;
    if ck.steps != cfg.schedule.steps {
        return Err(CliError::Config(format!(
            "{} was trained for {} steps, the config has {}",
            path.display(),
            ck.steps,
            cfg.schedule.steps
        )));
    }
    if ck.params.arch() != &cfg.model.architecture {
        return Err(CliError::Config(format!("{} does not match the configured architecture", path.display())));
    }
    Ok(ck.params)
}

/// Truncates or creates a file.
pub fn reset_file(path: &Path) -> CliResult<()> {
    File::create(path).map(|_| ()).map_err(|e| CliError::io(path, e))
}
