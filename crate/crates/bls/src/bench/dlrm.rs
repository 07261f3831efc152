//! Repeated DLRM inference runs and their metrics.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use bls_core::config::{BlsConfig, SafetyMode};
use bls_core::metrics::{aggregate, check_lag, LagEvent, LagReport, MetricsError, RunMetrics};
use bls_core::model::{LocalModel, ModelConfig, ModelError, CRITEO_DENSE, CRITEO_TABLES};

use super::run_ranks;
use crate::collective::bls_init;
use crate::dlrm::{forward_bls, forward_sync, per_peer_bytes_for, DlrmError, ForwardOptions, ForwardOutput, RankContext};
use crate::transport::in_process::{self, DeliveryOptions};
use crate::transport::{CommOptions, Communicator, TransportError, TransportStats};
use crate::workload::{Workload, WorkloadError, WorkloadKind, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    Sync,
    Bls,
}

impl LoopMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopMode::Sync => "sync",
            LoopMode::Bls => "bls",
        }
    }
}

impl fmt::Display for LoopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoopMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sync" => Ok(LoopMode::Sync),
            "bls" => Ok(LoopMode::Bls),
            _ => Err(format!("unknown loop mode {s:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Dlrm(#[from] DlrmError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("rank {rank}: {source}")]
    Rank { rank: usize, source: Box<BenchError> },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl BenchError {
    fn root(&self) -> &BenchError {
        match self {
            BenchError::Rank { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_config(&self) -> bool {
        match self.root() {
            BenchError::Config(_) | BenchError::Workload(_) | BenchError::Model(_) => true,
            BenchError::Dlrm(DlrmError::Config(_)) => true,
            BenchError::Dlrm(DlrmError::Collective(crate::collective::CollectiveError::Config(_))) => true,
            _ => false,
        }
    }

    pub fn is_hazard(&self) -> bool {
        matches!(self.root(), BenchError::Dlrm(e) if e.is_hazard())
    }

    pub fn is_timeout(&self) -> bool {
        match self.root() {
            BenchError::Dlrm(e) => e.is_timeout(),
            BenchError::Transport(e) => e.is_timeout(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DlrmBench {
    pub ranks: usize,
    pub workload: WorkloadKind,
    pub mode: LoopMode,
    pub bound_k: usize,
    pub safety: SafetyMode,
    /// Overrides the default slot count for `safety`.
    pub slot_count: Option<usize>,
    pub batches: usize,
    pub batch_size: usize,
    pub emb_dim: usize,
    pub tables: usize,
    pub rows_per_table: usize,
    pub hidden: usize,
    pub max_multiplicity: usize,
    pub delay_max_s: f64,
    pub seed: u64,
    pub runs: usize,
    /// Untimed runs before the measured ones.
    pub warmup_runs: usize,
    pub csv_path: Option<std::path::PathBuf>,
    pub delivery: DeliveryOptions,
    pub op_timeout: Option<Duration>,
}

impl Default for DlrmBench {
    fn default() -> Self {
        DlrmBench {
            ranks: 8,
            workload: WorkloadKind::Balanced,
            mode: LoopMode::Bls,
            bound_k: 1,
            safety: SafetyMode::Acked,
            slot_count: None,
            batches: 64,
            batch_size: 512,
            emb_dim: 64,
            tables: CRITEO_TABLES,
            rows_per_table: 10_000,
            hidden: 64,
            max_multiplicity: 100,
            delay_max_s: 0.01,
            seed: 1,
            runs: 5,
            warmup_runs: 0,
            csv_path: None,
            delivery: DeliveryOptions::default(),
            op_timeout: Some(Duration::from_secs(120)),
        }
    }
}

impl DlrmBench {
    pub fn effective_bound(&self) -> usize {
        match self.mode {
            LoopMode::Sync => 0,
            LoopMode::Bls => self.bound_k,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::desk(self.tables, self.emb_dim, self.rows_per_table, self.hidden, self.seed)
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            kind: self.workload,
            batch_size: self.batch_size,
            num_batches: self.batches,
            num_dense: CRITEO_DENSE,
            table_rows: vec![self.rows_per_table; self.tables],
            max_multiplicity: self.max_multiplicity,
            delay_max_s: self.delay_max_s,
            seed: self.seed,
            csv_path: self.csv_path.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.ranks == 0 || self.runs == 0 || self.batches == 0 && self.workload != WorkloadKind::Csv {
            return bad("ranks, runs and batches must be positive".into());
        }
        if self.workload == WorkloadKind::Csv && self.tables != CRITEO_TABLES {
            return bad(format!("csv workloads have {CRITEO_TABLES} categorical fields, got --tables {}", self.tables));
        }
        if self.tables < self.ranks {
            return bad(format!("{} tables cannot be spread over {} ranks", self.tables, self.ranks));
        }
        if self.workload == WorkloadKind::Delays && !(self.delay_max_s >= 0.0) {
            return bad("delay maximum must be non-negative".into());
        }
        self.model_config().validate()?;
        self.bls_config(1).validate_for_guard().map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn bls_config(&self, per_peer_bytes: usize) -> BlsConfig {
        let c = BlsConfig::new(self.effective_bound(), self.safety, per_peer_bytes);
        match self.slot_count {
            Some(s) => c.with_slot_count(s),
            None => c,
        }
    }

    /// `backend-mode-safety` label used in summaries.
    pub fn mode_label(&self, backend: &str) -> String {
        format!("{backend}-{}-{}", self.mode, self.safety.as_str())
    }
}

/// Everything one rank measured.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankRecord {
    pub rank: usize,
    pub runs: Vec<ForwardOutput>,
    pub traces: Vec<Vec<LagEvent>>,
    /// Transport counters after the final fence.
    pub stats: TransportStats,
}

/// Worker body for one rank: initialize the collective once, then run the
/// measured loops with a fence before and after each.
pub fn rank_main(comm: Communicator, bench: &DlrmBench, workload: &Workload) -> Result<RankRecord, BenchError> {
    let rank = comm.rank();
    let n = comm.size();
    let model = LocalModel::for_rank(&bench.model_config(), n, rank)?;
    let per_peer = per_peer_bytes_for(&model, n, &workload.batches);
    let mut ctx = bls_init(comm, bench.bls_config(per_peer)).map_err(DlrmError::from)?;
    ctx.set_timeout(bench.op_timeout);
    let mut rc = RankContext::new(model, ctx);
    let mut rec = RankRecord {
        rank,
        ..Default::default()
    };
    if let Err(e) = measured_runs(&mut rc, bench, workload, &mut rec) {
        rc.ctx.comm_mut().abort(&e.to_string());
        return Err(e);
    }
    rec.stats = rc.ctx.comm().stats();
    Ok(rec)
}

fn measured_runs(rc: &mut RankContext, bench: &DlrmBench, workload: &Workload, rec: &mut RankRecord) -> Result<(), BenchError> {
    let opts = ForwardOptions {
        delays: workload.delays[rec.rank].clone(),
        record_exchange: false,
    };
    for run in 0..bench.warmup_runs + bench.runs {
        rc.ctx.fence().map_err(DlrmError::from)?;
        rc.ctx.take_trace();
        let base = rc.ctx.next_iteration();
        let out = match bench.mode {
            LoopMode::Sync => forward_sync(rc, &workload.batches, &opts)?,
            LoopMode::Bls => forward_bls(rc, &workload.batches, bench.bound_k, &opts)?,
        };
        rc.ctx.fence().map_err(DlrmError::from)?;
        // Lag is measured within a run, so renumber from the run's first batch.
        let trace: Vec<LagEvent> = rc
            .ctx
            .take_trace()
            .into_iter()
            .map(|e| LagEvent {
                iteration: e.iteration - base,
                ..e
            })
            .collect();
        if run >= bench.warmup_runs {
            rec.runs.push(out);
            rec.traces.push(trace);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DlrmReport {
    pub bench: DlrmBench,
    pub backend: String,
    /// `records[rank]`.
    pub records: Vec<RankRecord>,
    pub metrics: RunMetrics,
    /// Worst lag over all runs.
    pub lag: LagReport,
}

impl DlrmReport {
    /// Assemble a report from per-rank records, in any order.
    pub fn from_records(bench: &DlrmBench, backend: &str, mut records: Vec<RankRecord>) -> Result<Self, BenchError> {
        records.sort_by_key(|r| r.rank);
        let runs = records.first().map_or(0, |r| r.runs.len());
        let num_batches = records.first().and_then(|r| r.runs.first()).map_or(0, |o| o.latencies.len());
        let samples: Vec<Vec<Vec<f64>>> = (0..runs)
            .map(|i| records.iter().map(|r| r.runs[i].latencies.clone()).collect())
            .collect();
        let metrics = aggregate(&samples, num_batches)?;
        let k = bench.effective_bound() as u64;
        let mut lag = check_lag(&[], k);
        for i in 0..runs {
            let traces: Vec<Vec<LagEvent>> = records.iter().map(|r| r.traces[i].clone()).collect();
            let l = check_lag(&traces, k);
            if l.max_lag >= lag.max_lag {
                lag = l;
            }
        }
        Ok(DlrmReport {
            bench: bench.clone(),
            backend: backend.to_string(),
            records,
            metrics,
            lag,
        })
    }

    /// Predictions of the last run, `[rank][batch][row]`.
    pub fn predictions(&self) -> Vec<Vec<Vec<f32>>> {
        self.records
            .iter()
            .map(|r| r.runs.last().map(|o| o.predictions.clone()).unwrap_or_default())
            .collect()
    }
}

/// Run the benchmark with every rank as a thread of this process.
pub fn run_in_process(bench: &DlrmBench) -> Result<DlrmReport, BenchError> {
    bench.validate()?;
    let workload = bench.workload_spec().generate(bench.ranks)?;
    run_in_process_with(bench, &workload)
}

/// Same as [`run_in_process`] on a pre-generated workload.
pub fn run_in_process_with(bench: &DlrmBench, workload: &Workload) -> Result<DlrmReport, BenchError> {
    let comms = in_process::create(bench.ranks, bench.delivery, CommOptions::from_env())?;
    let results = run_ranks(comms, |c| {
        let rank = c.rank();
        rank_main(c, bench, workload).map_err(|e| BenchError::Rank {
            rank,
            source: Box::new(e),
        })
    });
    let records = collect(results)?;
    DlrmReport::from_records(bench, "in_process", records)
}

/// First error by severity: a hazard beats a timeout beats anything else,
/// since peers of a failing rank usually just time out.
pub(crate) fn collect<T>(results: Vec<Result<T, BenchError>>) -> Result<Vec<T>, BenchError> {
    if results.iter().all(Result::is_ok) {
        return Ok(results.into_iter().map(|r| r.unwrap_or_else(|_| unreachable!())).collect());
    }
    let mut errs: Vec<BenchError> = results.into_iter().filter_map(Result::err).collect();
    let pick = errs
        .iter()
        .position(BenchError::is_hazard)
        .or_else(|| errs.iter().position(|e| !e.is_timeout()))
        .unwrap_or(0);
    Err(errs.swap_remove(pick))
}
