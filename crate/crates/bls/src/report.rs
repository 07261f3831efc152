//! CSV files written by the benchmarks and the loaders that read them back.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bls_core::metrics::{aggregate, MetricsError, RunMetrics};
use serde::{Deserialize, Serialize};

use crate::bench::a2a::A2aPoint;
use crate::bench::dlrm::DlrmReport;

pub const METRICS_CSV: &str = "dlrm_metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const A2A_CSV: &str = "a2a.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Shape { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Metrics { path: PathBuf, source: MetricsError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: usize,
    pub rank: usize,
    pub iteration: usize,
    pub latency_s: f64,
    pub delay_injected_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub workload: String,
    pub backend_mode: String,
    pub bound_k: usize,
    pub latency_mean: f64,
    pub latency_ci95: f64,
    pub throughput_mean: f64,
    pub throughput_ci95: f64,
    pub max_lag: u64,
}

impl SummaryRow {
    fn key(&self) -> (String, String, usize) {
        (self.workload.clone(), self.backend_mode.clone(), self.bound_k)
    }

    /// Loop mode encoded in `backend_mode`.
    pub fn is_sync(&self) -> bool {
        self.backend_mode.split('-').any(|p| p == "sync")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2aRow {
    pub sweep: String,
    pub mode: String,
    pub bound_k: usize,
    pub ranks: usize,
    pub size_bytes: usize,
    pub iters: usize,
    pub total_s: f64,
    pub per_op_s: f64,
    pub completed: bool,
}

impl From<&A2aPoint> for A2aRow {
    fn from(p: &A2aPoint) -> Self {
        A2aRow {
            sweep: p.sweep.as_str().to_string(),
            mode: p.mode.as_str().to_string(),
            bound_k: p.bound_k,
            ranks: p.ranks,
            size_bytes: p.size_bytes,
            iters: p.iters,
            total_s: p.total_s,
            per_op_s: p.per_op_s(),
            completed: p.completed,
        }
    }
}

pub fn metric_rows(report: &DlrmReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for rec in &report.records {
        for (run, out) in rec.runs.iter().enumerate() {
            for (iteration, &latency_s) in out.latencies.iter().enumerate() {
                rows.push(MetricRow {
                    run,
                    rank: rec.rank,
                    iteration,
                    latency_s,
                    delay_injected_s: out.delays.get(iteration).copied().unwrap_or(0.0),
                });
            }
        }
    }
    rows.sort_by_key(|r| (r.run, r.rank, r.iteration));
    rows
}

pub fn summary_row(report: &DlrmReport) -> SummaryRow {
    let m = &report.metrics;
    SummaryRow {
        workload: report.bench.workload.to_string(),
        backend_mode: report.bench.mode_label(&report.backend),
        bound_k: report.bench.effective_bound(),
        latency_mean: m.latency.mean,
        latency_ci95: m.latency.ci95,
        throughput_mean: m.throughput_summary.mean,
        throughput_ci95: m.throughput_summary.ci95,
        max_lag: report.lag.max_lag,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}

/// Insert `rows` into the summary at `path`, replacing any row with the same
/// workload, backend_mode and bound. Returns the merged table.
pub fn merge_summary(path: &Path, rows: &[SummaryRow]) -> Result<Vec<SummaryRow>, ReportError> {
    let mut table: BTreeMap<(String, String, usize), SummaryRow> = BTreeMap::new();
    if path.exists() {
        for r in read_rows::<SummaryRow>(path)? {
            table.insert(r.key(), r);
        }
    }
    for r in rows {
        table.insert(r.key(), r.clone());
    }
    let merged: Vec<SummaryRow> = table.into_values().collect();
    write_rows(path, &merged)?;
    Ok(merged)
}

/// Rebuild `[run][rank][batch]` samples from a metrics CSV and aggregate them.
pub fn load_and_aggregate(path: &Path) -> Result<RunMetrics, ReportError> {
    let rows: Vec<MetricRow> = read_rows(path)?;
    let shape = |msg: String| ReportError::Shape {
        path: path.to_path_buf(),
        msg,
    };
    let runs = rows.iter().map(|r| r.run + 1).max().ok_or_else(|| shape("no rows".into()))?;
    let ranks = rows.iter().map(|r| r.rank + 1).max().unwrap_or(0);
    let batches = rows.iter().map(|r| r.iteration + 1).max().unwrap_or(0);
    if rows.len() != runs * ranks * batches {
        return Err(shape(format!("{} rows do not fill {runs} runs x {ranks} ranks x {batches} batches", rows.len())));
    }
    let mut samples = vec![vec![vec![f64::NAN; batches]; ranks]; runs];
    for r in &rows {
        let cell = &mut samples[r.run][r.rank][r.iteration];
        if !cell.is_nan() {
            return Err(shape(format!("duplicate row run {} rank {} iteration {}", r.run, r.rank, r.iteration)));
        }
        *cell = r.latency_s;
    }
    aggregate(&samples, batches).map_err(|source| ReportError::Metrics {
        path: path.to_path_buf(),
        source,
    })
}

/// Same as [`merge_summary`] for the alltoallv table, keyed by every column
/// except the measurements.
pub fn merge_a2a(path: &Path, rows: &[A2aRow]) -> Result<Vec<A2aRow>, ReportError> {
    let key = |r: &A2aRow| (r.sweep.clone(), r.mode.clone(), r.bound_k, r.ranks, r.size_bytes, r.iters);
    let mut table = BTreeMap::new();
    if path.exists() {
        for r in read_rows::<A2aRow>(path)? {
            table.insert(key(&r), r);
        }
    }
    for r in rows {
        table.insert(key(r), r.clone());
    }
    let merged: Vec<A2aRow> = table.into_values().collect();
    write_rows(path, &merged)?;
    Ok(merged)
}
