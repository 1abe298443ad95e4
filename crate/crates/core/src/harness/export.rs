//! Per-iteration metrics flattened into a header-stable CSV.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::pipelines::checkpoint::{completed_iterations, IterationArtifacts};
use crate::util::atomic_write;

use super::{io_err, HarnessError};

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u32,
    pub win_rate: f64,
    pub loss_rate: f64,
    pub tie_rate: f64,
    pub avg_return: f64,
    /// Blank in the CSV when the run measured no accuracy.
    pub accuracy: Option<f64>,
    pub parse_failure_rate: f64,
    pub fallback_rate: f64,
}

/// Writes `metrics.csv` (or `out`) with one row per completed iteration.
pub fn export_metrics(run_dir: &Path, out: Option<&Path>) -> Result<PathBuf, HarnessError> {
    let n = completed_iterations(run_dir);
    if n == 0 {
        return Err(HarnessError::EmptyRun(run_dir.display().to_string()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for k in 0..n {
        let m = IterationArtifacts::read(run_dir, k)?
            .ok_or_else(|| HarnessError::EmptyRun(run_dir.display().to_string()))?
            .metrics;
        w.serialize(MetricsRow {
            iteration: m.iteration,
            win_rate: m.win_rate,
            loss_rate: m.loss_rate,
            tie_rate: m.tie_rate,
            avg_return: m.avg_return,
            accuracy: m.accuracy,
            parse_failure_rate: m.parse_failure_rate,
            fallback_rate: m.fallback_rate,
        })
        .map_err(|e| io_err(run_dir, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(run_dir, e))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(METRICS_FILE));
    atomic_write(&path, &bytes).map_err(|e| io_err(&path, e))?;
    Ok(path)
}
