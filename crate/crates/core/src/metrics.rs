//! Training and evaluation records, and the observer interface through which
//! trainers report progress and hand over checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, WinCounts};
use crate::score_net::ScoreModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricRecord {
    /// First line of every metrics file.
    Header {
        schema_version: u32,
        command: String,
    },
    SftStep {
        step: usize,
        loss: f64,
        lr: f64,
        wall_time: Option<f64>,
    },
    SpinStep {
        iteration: usize,
        step: usize,
        loss: f64,
        lr: f64,
        /// Batch mean of the outer-loss argument.
        mean_argument: f64,
        /// Mean and max of the nonnegative per-sample weights `-l'(u)`.
        weight_mean: f64,
        weight_max: f64,
        guard_events: usize,
        /// Mean path test function over the synthetic batch, when requested.
        test_function: Option<f64>,
        cache_id: String,
        wall_time: Option<f64>,
    },
    IterationStart {
        iteration: usize,
        opponent: String,
        cache_id: String,
        cache_size: usize,
        steps: usize,
        lr: f64,
        beta_scale: f64,
        beta: Vec<f64>,
        implied_lambda: Vec<f64>,
        /// Loss at the starting point, where the main player equals the opponent.
        initial_loss: f64,
    },
    IterationEnd {
        iteration: usize,
        checkpoint: String,
        guard_events: usize,
    },
    Eval {
        label: String,
        iteration: Option<usize>,
        report: EvalReport,
    },
    WinRate {
        label: String,
        counts: WinCounts,
        rate: f64,
    },
}

/// Where a checkpoint comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointTag {
    /// Parameters before any training.
    Init,
    /// Inner-loop snapshot; `iteration` is `None` for supervised training.
    Step { iteration: Option<usize>, step: usize },
    /// End of supervised training.
    SftFinal,
    /// Opponent promoted at the end of self-play iteration `k` (1-based).
    Iteration(usize),
}

pub trait Observer {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;

    fn checkpoint(&mut self, _tag: CheckpointTag, _params: &ScoreModelParams) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemoryObserver {
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<(CheckpointTag, ScoreModelParams)>,
}

impl Observer for MemoryObserver {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, tag: CheckpointTag, params: &ScoreModelParams) -> Result<()> {
        self.checkpoints.push((tag, params.clone()));
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {
    fn record(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonlWriter { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::format(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
