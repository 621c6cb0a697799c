use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RclError, Result};
use crate::gpm::ProjectionMemory;
use crate::model::Network;
use crate::trainer::{AccuracyMatrix, EffectiveParams, Method, RunOutcome};

pub const SCHEMA_VERSION: u32 = 1;

pub const RUN_METRICS: &str = "run_metrics.json";
pub const ACC_MATRIX: &str = "acc_matrix.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const MEMORY: &str = "memory.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    /// Echo of the training configuration (or the whole experiment when run from the CLI).
    pub config: serde_json::Value,
    pub effective: EffectiveParams,
    pub acc_matrix: AccuracyMatrix,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    /// Mean training objective per epoch, one list per task.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Basis vectors added per layer after each task.
    pub gpm_ranks: Vec<BTreeMap<usize, usize>>,
    pub memory_widths: BTreeMap<usize, usize>,
    /// Largest orthogonality audit ratio per task.
    pub audit_max: Vec<f64>,
    pub wall_clock_secs: Vec<f64>,
    /// Set when the run stopped early; results up to the failure are kept.
    pub error: Option<String>,
}

impl RunRecord {
    /// The record with wall-clock timings removed, for reproducibility comparisons.
    pub fn without_timings(&self) -> RunRecord {
        RunRecord { wall_clock_secs: Vec::new(), ..self.clone() }
    }

    pub fn read(path: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path).map_err(|e| RclError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes the run record, the accuracy matrix, the final network and the memory to `dir`.
/// `metadata` is stored inside the checkpoint.
pub fn persist_run(outcome: &RunOutcome, metadata: serde_json::Value, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RclError::io(dir, e))?;
    let metrics = dir.join(RUN_METRICS);
    let text = serde_json::to_string_pretty(&outcome.record)?;
    std::fs::write(&metrics, text).map_err(|e| RclError::io(&metrics, e))?;
    write_acc_matrix(&outcome.record.acc_matrix, &dir.join(ACC_MATRIX))?;
    outcome.net.save(&dir.join(CHECKPOINT), metadata)?;
    outcome.memory.save(&dir.join(MEMORY))
}

/// One line per finished task, `t + 1` values on line `t`.
pub fn write_acc_matrix(a: &AccuracyMatrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    for row in &a.rows {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| RclError::io(path, e))
}

pub fn read_acc_matrix(path: &Path) -> Result<AccuracyMatrix> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| RclError::contract("read_acc_matrix", format!("{v:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    AccuracyMatrix::new(rows)
}

fn csv_io(path: &Path, e: csv::Error) -> RclError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RclError::io(path, io),
        kind => RclError::contract("csv", format!("{}: {kind:?}", path.display())),
    }
}

/// Loads a checkpoint and the memory saved next to it, when present.
pub fn load_run_artifacts(checkpoint: &Path) -> Result<(Network, serde_json::Value, Option<ProjectionMemory>)> {
    let (net, meta) = Network::load(checkpoint)?;
    let mem_path = checkpoint.with_file_name(MEMORY);
    let memory = if mem_path.exists() { Some(ProjectionMemory::load(&mem_path)?) } else { None };
    Ok((net, meta, memory))
}
