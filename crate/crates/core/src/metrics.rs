//! Latency/throughput aggregation and iteration-lag checking.
//!
//! For run `i` and rank `j`, `L(i,j)` is the mean per-batch latency. The
//! reported latency is the mean over all `L(i,j)`; the throughput of run `i`
//! is `T(i) = sum_j num_batches / L(i,j)` and the reported throughput is the
//! mean over runs. Both carry 95% Student-t confidence half-widths.

use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    NoRuns,
    NoRanks { run: usize },
    Ragged { run: usize, expected_ranks: usize, got: usize },
    SampleCount { run: usize, rank: usize, expected: usize, got: usize },
    NonPositiveLatency { run: usize, rank: usize },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::NoRuns => f.write_str("no runs to aggregate"),
            MetricsError::NoRanks { run } => write!(f, "run {run} has no ranks"),
            MetricsError::Ragged { run, expected_ranks, got } => {
                write!(f, "run {run} has {got} ranks, expected {expected_ranks}")
            }
            MetricsError::SampleCount { run, rank, expected, got } => {
                write!(f, "run {run} rank {rank} has {got} samples, expected {expected}")
            }
            MetricsError::NonPositiveLatency { run, rank } => {
                write!(f, "run {run} rank {rank} has a non-positive mean latency")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricsError {}

const T975: [f64; 30] = [
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622, 2.2281, 2.2010, 2.1788, 2.1604,
    2.1448, 2.1314, 2.1199, 2.1098, 2.1009, 2.0930, 2.0860, 2.0796, 2.0739, 2.0687, 2.0639, 2.0595, 2.0555,
    2.0518, 2.0484, 2.0452, 2.0423,
];

/// Two-sided 95% critical value of Student's t with `df` degrees of freedom.
pub fn student_t_975(df: usize) -> f64 {
    assert!(df > 0);
    if df <= T975.len() {
        return T975[df - 1];
    }
    // Cornish-Fisher expansion around the normal quantile.
    let z = 1.959_963_984_540_054_f64;
    let nu = df as f64;
    let z3 = z * z * z;
    let z5 = z3 * z * z;
    let z7 = z5 * z * z;
    z + (z3 + z) / (4.0 * nu)
        + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * nu * nu)
        + (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / (384.0 * nu * nu * nu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// 95% half-width; NaN for a single sample.
    pub ci95: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        let n = samples.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                ci95: f64::NAN,
                n,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Summary { mean, ci95: f64::NAN, n };
        }
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Summary {
            mean,
            ci95: student_t_975(n - 1) * libm::sqrt(var / n as f64),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub num_batches: usize,
    /// `L(i,j)` indexed `[run][rank]`.
    pub mean_latency: Vec<Vec<f64>>,
    /// `T(i)` per run.
    pub throughput: Vec<f64>,
    pub latency: Summary,
    pub throughput_summary: Summary,
}

/// Aggregate per-batch latency samples indexed `[run][rank][batch]`.
pub fn aggregate(samples: &[Vec<Vec<f64>>], num_batches: usize) -> Result<RunMetrics, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    let ranks = samples[0].len();
    let mut mean_latency = Vec::with_capacity(samples.len());
    for (run, per_rank) in samples.iter().enumerate() {
        if per_rank.is_empty() {
            return Err(MetricsError::NoRanks { run });
        }
        if per_rank.len() != ranks {
            return Err(MetricsError::Ragged {
                run,
                expected_ranks: ranks,
                got: per_rank.len(),
            });
        }
        let mut row = Vec::with_capacity(ranks);
        for (rank, s) in per_rank.iter().enumerate() {
            if s.len() != num_batches || num_batches == 0 {
                return Err(MetricsError::SampleCount {
                    run,
                    rank,
                    expected: num_batches,
                    got: s.len(),
                });
            }
            let l = s.iter().sum::<f64>() / num_batches as f64;
            if !(l > 0.0) {
                return Err(MetricsError::NonPositiveLatency { run, rank });
            }
            row.push(l);
        }
        mean_latency.push(row);
    }
    Ok(from_mean_latencies(mean_latency, num_batches))
}

/// Aggregate already-averaged `L(i,j)` values.
pub fn from_mean_latencies(mean_latency: Vec<Vec<f64>>, num_batches: usize) -> RunMetrics {
    let throughput: Vec<f64> = mean_latency
        .iter()
        .map(|row| row.iter().map(|l| num_batches as f64 / l).sum())
        .collect();
    let flat: Vec<f64> = mean_latency.iter().flatten().copied().collect();
    RunMetrics {
        num_batches,
        latency: Summary::of(&flat),
        throughput_summary: Summary::of(&throughput),
        mean_latency,
        throughput,
    }
}

/// One initiation event: `rank` started `iteration` at time `t_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LagEvent {
    pub iteration: u64,
    pub t_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LagReport {
    pub max_lag: u64,
    pub limit: u64,
    pub pass: bool,
}

/// Replay per-rank initiation traces in time order and report the largest
/// spread between the most and least advanced rank. A rank that has not
/// initiated anything counts as iteration -1. Events sharing a timestamp are
/// applied together before the spread is measured.
pub fn check_lag(traces: &[Vec<LagEvent>], bound_k: u64) -> LagReport {
    let limit = bound_k + 1;
    let mut events: Vec<(u64, usize, u64)> = traces
        .iter()
        .enumerate()
        .flat_map(|(r, t)| t.iter().map(move |e| (e.t_ns, r, e.iteration)))
        .collect();
    events.sort_by_key(|&(t, r, _)| (t, r));
    let mut last: Vec<i64> = alloc::vec![-1; traces.len()];
    let mut max_lag = 0i64;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            let (_, r, it) = events[i];
            last[r] = last[r].max(it as i64);
            i += 1;
        }
        let hi = last.iter().copied().max().unwrap_or(-1);
        let lo = last.iter().copied().min().unwrap_or(-1);
        max_lag = max_lag.max(hi - lo);
    }
    let max_lag = max_lag as u64;
    LagReport {
        max_lag,
        limit,
        pass: max_lag <= limit,
    }
}
