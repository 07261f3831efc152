//! Distributed DLRM inference: the synchronous forward loop and the
//! bounded-lag loop with its `unfinished > bound` guard and final drain.
//!
//! Every rank holds a contiguous block of tables and a contiguous row block
//! of each batch. Each body pools the rank's tables for the whole batch,
//! ships every peer its rows, then runs the bottom MLP on its own rows while
//! the exchange is in flight.

use std::collections::VecDeque;
use std::thread;
use std::time::{Duration, Instant};

use bls_core::config::ConfigError;
use bls_core::model::{pack_for_peer, row_block, unpack_exchange, InferenceBatch, LocalModel, ModelError};
use bls_core::window::SEGMENT_HEADER_LEN;
use bls_core::RankId;

use crate::collective::{BlsContext, CollectiveError, RecvResult};
use crate::workload::TimedPhase;

#[derive(Debug, thiserror::Error)]
pub enum DlrmError {
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
}

impl DlrmError {
    pub fn is_hazard(&self) -> bool {
        matches!(self, DlrmError::Collective(e) if e.is_hazard())
    }

    pub fn is_timeout(&self) -> bool {
        matches!(self, DlrmError::Collective(e) if e.is_timeout())
    }
}

/// Largest segment payload (plus its length header) any batch needs.
pub fn per_peer_bytes_for(model: &LocalModel, comm_size: usize, batches: &[InferenceBatch]) -> usize {
    let c = &model.config;
    let mut max = 0;
    for b in batches {
        for owner in 0..comm_size {
            for dest in 0..comm_size {
                max = max.max(b.exchange_bytes(c.num_tables, c.emb_dim, comm_size, owner, dest));
            }
        }
    }
    max.max(1) + SEGMENT_HEADER_LEN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopEvent {
    Initiate(u64),
    Wait(u64),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Sleep at the top of body `j`, in seconds.
    pub delays: Vec<f64>,
    /// Keep each received sample-major `ly` block.
    pub record_exchange: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOutput {
    /// CTRs of this rank's rows, per original batch index.
    pub predictions: Vec<Vec<f32>>,
    /// Seconds per loop body; the final drain is charged to the last body.
    pub latencies: Vec<f64>,
    pub delays: Vec<f64>,
    pub events: Vec<LoopEvent>,
    /// Largest number of outstanding requests at the end of a body.
    pub max_outstanding: usize,
    /// Sample-major `ly` per batch when recorded.
    pub exchanged: Vec<Vec<f32>>,
}

pub struct RankContext {
    pub model: LocalModel,
    pub ctx: BlsContext,
}

impl RankContext {
    pub fn new(model: LocalModel, ctx: BlsContext) -> Self {
        RankContext { model, ctx }
    }

    pub fn rank(&self) -> RankId {
        self.ctx.rank()
    }

    pub fn size(&self) -> usize {
        self.ctx.size()
    }
}

struct Pending {
    batch: usize,
    /// Collective iteration carrying this batch.
    iteration: u64,
    rows: usize,
    x: Vec<f32>,
}

fn complete(
    rc: &mut RankContext,
    pending: &mut VecDeque<Pending>,
    out: &mut ForwardOutput,
    record: bool,
) -> Result<(), DlrmError> {
    let r: RecvResult = rc.ctx.alltoallv_wait()?;
    finish(rc, r, pending, out, record)
}

fn finish(
    rc: &RankContext,
    r: RecvResult,
    pending: &mut VecDeque<Pending>,
    out: &mut ForwardOutput,
    record: bool,
) -> Result<(), DlrmError> {
    let p = pending
        .pop_front()
        .ok_or_else(|| DlrmError::Invalid("dense-output queue out of step with requests".into()))?;
    if r.iteration != p.iteration {
        return Err(DlrmError::Invalid(format!(
            "completed iteration {} while the oldest queued batch is carried by {}",
            r.iteration, p.iteration
        )));
    }
    out.events.push(LoopEvent::Wait(p.batch as u64));
    let payloads: Vec<&[u8]> = r.segments.iter().map(Vec::as_slice).collect();
    let ly = unpack_exchange(&rc.model.config, rc.size(), p.rows, &payloads)?;
    out.predictions[p.batch] = rc.model.predict(&p.x, &ly)?;
    if record {
        out.exchanged[p.batch] = ly;
    }
    Ok(())
}

fn sleep_for(delays: &[f64], j: usize) -> f64 {
    let d = delays.get(j).copied().unwrap_or(0.0);
    if d > 0.0 {
        thread::sleep(Duration::from_secs_f64(d));
    }
    d
}

fn start(rc: &mut RankContext, batch: &InferenceBatch) -> Result<(), DlrmError> {
    let n = rc.size();
    let d = rc.model.config.emb_dim;
    let t = rc.model.config.num_tables;
    let pooled = rc.model.apply_emb(batch)?;
    let send: Vec<Vec<u8>> = (0..n).map(|q| pack_for_peer(&pooled, row_block(batch.batch_size, n, q), d)).collect();
    let recv: Vec<usize> = (0..n).map(|q| batch.exchange_bytes(t, d, n, q, rc.rank())).collect();
    rc.ctx.alltoallv_initiate(&send, &recv)?;
    Ok(())
}

fn new_output(batches: &[InferenceBatch], opts: &ForwardOptions) -> ForwardOutput {
    ForwardOutput {
        predictions: vec![Vec::new(); batches.len()],
        latencies: Vec::with_capacity(batches.len()),
        delays: Vec::with_capacity(batches.len()),
        events: Vec::with_capacity(2 * batches.len()),
        max_outstanding: 0,
        exchanged: if opts.record_exchange { vec![Vec::new(); batches.len()] } else { Vec::new() },
    }
}

/// Exchange and complete each batch before starting the next.
pub fn forward_sync(rc: &mut RankContext, batches: &[InferenceBatch], opts: &ForwardOptions) -> Result<ForwardOutput, DlrmError> {
    if rc.ctx.outstanding() > 0 {
        return Err(DlrmError::Invalid("requests outstanding before the loop".into()));
    }
    let _timed = TimedPhase::enter();
    let n = rc.size();
    let me = rc.rank();
    let mut out = new_output(batches, opts);
    let mut pending = VecDeque::with_capacity(1);
    for (j, batch) in batches.iter().enumerate() {
        let t0 = Instant::now();
        out.delays.push(sleep_for(&opts.delays, j));
        start(rc, batch)?;
        out.events.push(LoopEvent::Initiate(j as u64));
        let rows = row_block(batch.batch_size, n, me);
        let x = rc.model.bottom_mlp(batch.dense_rows(rows.clone()))?;
        pending.push_back(Pending {
            batch: j,
            iteration: rc.ctx.next_iteration() - 1,
            rows: rows.len(),
            x,
        });
        complete(rc, &mut pending, &mut out, opts.record_exchange)?;
        out.max_outstanding = out.max_outstanding.max(rc.ctx.outstanding());
        out.latencies.push(t0.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Keep up to `bound_k` exchanges in flight between bodies.
pub fn forward_bls(
    rc: &mut RankContext,
    batches: &[InferenceBatch],
    bound_k: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput, DlrmError> {
    let mut cfg = *rc.ctx.config();
    cfg.bound_k = bound_k;
    cfg.validate_for_guard()?;
    if rc.ctx.outstanding() > 0 {
        return Err(DlrmError::Invalid("requests outstanding before the loop".into()));
    }
    let _timed = TimedPhase::enter();
    let n = rc.size();
    let me = rc.rank();
    let mut out = new_output(batches, opts);
    let mut pending = VecDeque::with_capacity(bound_k + 1);
    for (j, batch) in batches.iter().enumerate() {
        let t0 = Instant::now();
        out.delays.push(sleep_for(&opts.delays, j));
        start(rc, batch)?;
        out.events.push(LoopEvent::Initiate(j as u64));
        let rows = row_block(batch.batch_size, n, me);
        let x = rc.model.bottom_mlp(batch.dense_rows(rows.clone()))?;
        pending.push_back(Pending {
            batch: j,
            iteration: rc.ctx.next_iteration() - 1,
            rows: rows.len(),
            x,
        });
        debug_assert_eq!(pending.len(), rc.ctx.outstanding());
        if rc.ctx.outstanding() > bound_k {
            complete(rc, &mut pending, &mut out, opts.record_exchange)?;
        }
        out.max_outstanding = out.max_outstanding.max(rc.ctx.outstanding());
        out.latencies.push(t0.elapsed().as_secs_f64());
    }
    let t0 = Instant::now();
    while rc.ctx.outstanding() > 0 {
        complete(rc, &mut pending, &mut out, opts.record_exchange)?;
    }
    if let Some(last) = out.latencies.last_mut() {
        *last += t0.elapsed().as_secs_f64();
    }
    Ok(out)
}
