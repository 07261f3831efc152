//! Alltoallv microbenchmark: a message-size sweep at a fixed iteration count
//! and an iteration sweep at a fixed 32 KB message size.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use bls_core::config::{BlsConfig, SafetyMode};
use bls_core::window::SEGMENT_HEADER_LEN;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dlrm::{collect, BenchError};
use super::run_ranks;
use crate::collective::{bls_init, ref_alltoallv, BlsContext, CollectiveError};
use crate::dlrm::DlrmError;
use crate::transport::in_process::{self, DeliveryOptions};
use crate::transport::{CommOptions, Communicator};

pub const ITER_SWEEP_BYTES: usize = 32 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A2aMode {
    Bls,
    Ref,
}

impl A2aMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            A2aMode::Bls => "bls",
            A2aMode::Ref => "ref",
        }
    }
}

impl fmt::Display for A2aMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for A2aMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bls" => Ok(A2aMode::Bls),
            "ref" => Ok(A2aMode::Ref),
            _ => Err(format!("unknown a2a mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Size,
    Iters,
}

impl Sweep {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sweep::Size => "size",
            Sweep::Iters => "iters",
        }
    }
}

impl FromStr for Sweep {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "size" => Ok(Sweep::Size),
            "iters" => Ok(Sweep::Iters),
            _ => Err(format!("unknown sweep {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct A2aBench {
    pub ranks: usize,
    pub mode: A2aMode,
    pub bound_k: usize,
    pub safety: SafetyMode,
    pub sizes: Vec<usize>,
    /// Iteration count used by the size sweep.
    pub size_iters: usize,
    pub iters: Vec<usize>,
    pub seed: u64,
    pub budget: Duration,
    pub delivery: DeliveryOptions,
}

/// 1 B to 1 MB in steps of 4.
pub fn default_sizes() -> Vec<usize> {
    (0..=10).map(|i| 1usize << (2 * i)).collect()
}

impl Default for A2aBench {
    fn default() -> Self {
        A2aBench {
            ranks: 8,
            mode: A2aMode::Bls,
            bound_k: 0,
            safety: SafetyMode::Acked,
            sizes: default_sizes(),
            size_iters: 100,
            iters: vec![1, 10, 100, 1000],
            seed: 1,
            budget: Duration::from_secs(120),
            delivery: DeliveryOptions::default(),
        }
    }
}

pub const MAX_SIZE: usize = 16 << 20;
pub const MAX_ITERS: usize = 10_000;

impl A2aBench {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.ranks == 0 {
            return bad("ranks must be positive".into());
        }
        if self.sizes.iter().any(|&s| s == 0 || s > MAX_SIZE) {
            return bad(format!("message sizes must be in 1..={MAX_SIZE}"));
        }
        if self.iters.iter().chain([&self.size_iters]).any(|&i| i == 0 || i > MAX_ITERS) {
            return bad(format!("iteration counts must be in 1..={MAX_ITERS}"));
        }
        if self.mode == A2aMode::Ref && self.bound_k != 0 {
            return bad("the reference exchange is blocking; --bound applies to bls mode only".into());
        }
        Ok(())
    }

    /// Sweep points in output order.
    pub fn points(&self) -> Vec<(Sweep, usize, usize)> {
        let mut p: Vec<_> = self.sizes.iter().map(|&s| (Sweep::Size, s, self.size_iters)).collect();
        p.extend(self.iters.iter().map(|&i| (Sweep::Iters, ITER_SWEEP_BYTES, i)));
        p
    }

    fn bls_config(&self, per_peer: usize) -> BlsConfig {
        match self.mode {
            A2aMode::Ref => BlsConfig::new(0, SafetyMode::Faithful, per_peer),
            A2aMode::Bls => BlsConfig::new(self.bound_k, self.safety, per_peer),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct A2aPoint {
    pub sweep: Sweep,
    pub mode: A2aMode,
    pub bound_k: usize,
    pub ranks: usize,
    pub size_bytes: usize,
    pub iters: usize,
    /// Slowest rank's wall time for all iterations; NaN when aborted.
    pub total_s: f64,
    pub completed: bool,
}

impl A2aPoint {
    pub fn per_op_s(&self) -> f64 {
        self.total_s / self.iters as f64
    }
}

#[derive(Debug)]
enum PointError {
    Budget,
    Other(BenchError),
}

impl From<CollectiveError> for PointError {
    fn from(e: CollectiveError) -> Self {
        PointError::Other(BenchError::Dlrm(DlrmError::Collective(e)))
    }
}

fn point(ctx: &mut BlsContext, bench: &A2aBench, size: usize, iters: usize) -> Result<f64, PointError> {
    let n = ctx.size();
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    rng.set_stream(ctx.rank() as u64);
    let segs: Vec<Vec<u8>> = (0..n)
        .map(|_| {
            let mut v = vec![0u8; size];
            rng.fill_bytes(&mut v);
            v
        })
        .collect();
    let lens = vec![size; n];
    ctx.fence()?;
    let t0 = Instant::now();
    for _ in 0..iters {
        match bench.mode {
            A2aMode::Ref => {
                ref_alltoallv(ctx, &segs, &lens)?;
            }
            A2aMode::Bls => {
                ctx.alltoallv_initiate(&segs, &lens)?;
                if ctx.outstanding() > bench.bound_k {
                    ctx.alltoallv_wait()?;
                }
            }
        }
        if t0.elapsed() > bench.budget {
            return Err(PointError::Budget);
        }
    }
    ctx.drain()?;
    let dt = t0.elapsed().as_secs_f64();
    ctx.fence()?;
    Ok(dt)
}

/// Worker body for one rank: one window sized for the largest point, every
/// point run in order. Once a point exceeds the budget the remaining points
/// are skipped, since peers are left mid-exchange.
pub fn rank_main(comm: Communicator, bench: &A2aBench, points: &[(Sweep, usize, usize)]) -> Result<Vec<Option<f64>>, BenchError> {
    let max = points.iter().map(|p| p.1).max().unwrap_or(1);
    let mut ctx = bls_init(comm, bench.bls_config(max + SEGMENT_HEADER_LEN)).map_err(DlrmError::from)?;
    ctx.set_timeout(Some(bench.budget + Duration::from_secs(5)));
    let mut out = Vec::with_capacity(points.len());
    for &(_, size, iters) in points {
        match point(&mut ctx, bench, size, iters) {
            Ok(t) => out.push(Some(t)),
            Err(PointError::Budget) => {
                log::warn!("rank {}: {size} B x {iters} exceeded the {:?} budget", ctx.rank(), bench.budget);
                out.resize(points.len(), None);
                return Ok(out);
            }
            Err(PointError::Other(e)) if e.is_timeout() => {
                out.resize(points.len(), None);
                return Ok(out);
            }
            Err(PointError::Other(e)) => {
                ctx.comm_mut().abort(&e.to_string());
                return Err(e);
            }
        }
    }
    Ok(out)
}

/// Combine per-rank timings (`[rank][point]`) into rows.
pub fn merge(bench: &A2aBench, points: &[(Sweep, usize, usize)], per_rank: &[Vec<Option<f64>>]) -> Vec<A2aPoint> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(sweep, size, iters))| {
            let times: Option<Vec<f64>> = per_rank.iter().map(|r| r.get(i).copied().flatten()).collect();
            let total = times.map(|t| t.into_iter().fold(0.0, f64::max));
            A2aPoint {
                sweep,
                mode: bench.mode,
                bound_k: bench.bound_k,
                ranks: bench.ranks,
                size_bytes: size,
                iters,
                total_s: total.unwrap_or(f64::NAN),
                completed: total.is_some(),
            }
        })
        .collect()
}

/// Every point on a fresh in-process communicator sized for it.
pub fn run_in_process(bench: &A2aBench) -> Result<Vec<A2aPoint>, BenchError> {
    bench.validate()?;
    let points = bench.points();
    let mut per_rank: Vec<Vec<Option<f64>>> = vec![Vec::new(); bench.ranks];
    for p in &points {
        let comms = in_process::create(bench.ranks, bench.delivery, CommOptions::from_env())?;
        let res = collect(run_ranks(comms, |c| rank_main(c, bench, std::slice::from_ref(p))))?;
        for (r, mut v) in res.into_iter().enumerate() {
            per_rank[r].append(&mut v);
        }
    }
    Ok(merge(bench, &points, &per_rank))
}
