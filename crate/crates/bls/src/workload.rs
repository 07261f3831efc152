//! Workload specs and file loading. Generation is refused while the calling
//! thread is inside a timed loop.

use std::cell::Cell;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bls_core::model::InferenceBatch;
use bls_core::workload::{gen_balanced, gen_delays, gen_hetero, parse_criteo_csv, BatchShape, CsvError};

thread_local! {
    static TIMED_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Marks the current thread as running a timed loop until dropped.
pub struct TimedPhase(());

impl TimedPhase {
    pub fn enter() -> Self {
        TIMED_DEPTH.with(|d| d.set(d.get() + 1));
        TimedPhase(())
    }

    pub fn active() -> bool {
        TIMED_DEPTH.with(|d| d.get() > 0)
    }
}

impl Drop for TimedPhase {
    fn drop(&mut self) {
        TIMED_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("workload generation requested inside a timed loop")]
    InsideTimedPhase,
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: CsvError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv workload needs a path")]
    MissingPath,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    Balanced,
    Hetero,
    Delays,
    Csv,
}

impl WorkloadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WorkloadKind::Balanced => "balanced",
            WorkloadKind::Hetero => "hetero",
            WorkloadKind::Delays => "delays",
            WorkloadKind::Csv => "csv",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "balanced" => Ok(WorkloadKind::Balanced),
            "hetero" => Ok(WorkloadKind::Hetero),
            "delays" => Ok(WorkloadKind::Delays),
            "csv" => Ok(WorkloadKind::Csv),
            _ => Err(format!("unknown workload {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub batch_size: usize,
    pub num_batches: usize,
    pub num_dense: usize,
    pub table_rows: Vec<usize>,
    /// Largest bag size for `Hetero`.
    pub max_multiplicity: usize,
    /// Upper bound of per-iteration sleeps for `Delays`.
    pub delay_max_s: f64,
    pub seed: u64,
    pub csv_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub batches: Vec<InferenceBatch>,
    /// `delays[rank][iteration]` in seconds.
    pub delays: Vec<Vec<f64>>,
}

impl WorkloadSpec {
    pub fn generate(&self, comm_size: usize) -> Result<Workload, WorkloadError> {
        if TimedPhase::active() {
            return Err(WorkloadError::InsideTimedPhase);
        }
        if self.batch_size == 0 || (self.kind != WorkloadKind::Csv && self.num_batches == 0) {
            return Err(WorkloadError::Invalid("batch_size and num_batches must be positive".into()));
        }
        if self.batch_size < comm_size {
            return Err(WorkloadError::Invalid(format!(
                "batch_size {} leaves some of the {comm_size} ranks without samples",
                self.batch_size
            )));
        }
        let shape = BatchShape {
            batch_size: self.batch_size,
            num_batches: self.num_batches,
            num_dense: self.num_dense,
            table_rows: self.table_rows.clone(),
        };
        let batches = match self.kind {
            WorkloadKind::Balanced | WorkloadKind::Delays => gen_balanced(&shape, self.seed),
            WorkloadKind::Hetero => gen_hetero(&shape, self.max_multiplicity, self.seed),
            WorkloadKind::Csv => {
                let path = self.csv_path.as_ref().ok_or(WorkloadError::MissingPath)?;
                let mut b = load_csv(path, self.batch_size, &self.table_rows)?;
                if self.num_batches > 0 {
                    b.truncate(self.num_batches);
                }
                if b.last().is_some_and(|l| l.batch_size < comm_size) {
                    b.pop();
                }
                b
            }
        };
        let delay_max = if self.kind == WorkloadKind::Delays { self.delay_max_s } else { 0.0 };
        let delays = gen_delays(comm_size, batches.len(), delay_max, self.seed);
        Ok(Workload { batches, delays })
    }
}

/// Read `label,13 dense,26 categorical` rows from a file.
pub fn load_csv(path: &Path, batch_size: usize, table_rows: &[usize]) -> Result<Vec<InferenceBatch>, WorkloadError> {
    if TimedPhase::active() {
        return Err(WorkloadError::InsideTimedPhase);
    }
    let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_criteo_csv(&text, batch_size, table_rows).map_err(|source| WorkloadError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: WorkloadKind) -> WorkloadSpec {
        WorkloadSpec {
            kind,
            batch_size: 8,
            num_batches: 3,
            num_dense: 13,
            table_rows: vec![20; 4],
            max_multiplicity: 10,
            delay_max_s: 0.01,
            seed: 1,
            csv_path: None,
        }
    }

    #[test]
    fn kinds() {
        let w = spec(WorkloadKind::Balanced).generate(2).unwrap();
        assert_eq!(w.batches.len(), 3);
        assert!(w.delays.iter().flatten().all(|&d| d == 0.0));
        let w = spec(WorkloadKind::Delays).generate(2).unwrap();
        assert!(w.delays.iter().flatten().any(|&d| d > 0.0));
        let w = spec(WorkloadKind::Hetero).generate(2).unwrap();
        assert!(w.batches[0].sparse.iter().flatten().any(|bag| bag.len() > 1));
        assert!(matches!(spec(WorkloadKind::Csv).generate(2), Err(WorkloadError::MissingPath)));
        assert!(spec(WorkloadKind::Balanced).generate(9).is_err());
    }

    #[test]
    fn refused_inside_timed_phase() {
        let g = TimedPhase::enter();
        assert!(matches!(spec(WorkloadKind::Balanced).generate(1), Err(WorkloadError::InsideTimedPhase)));
        drop(g);
        assert!(spec(WorkloadKind::Balanced).generate(1).is_ok());
    }
}
