//! Property checks runnable from the CLI: prediction equivalence, lag bound,
//! byte conservation, acked-mode safety and faithful-mode hazard detection.

use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use bls_core::config::{BlsConfig, SafetyMode};
use bls_core::metrics::{check_lag, LagEvent};
use bls_core::request::HazardError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dlrm::{run_in_process_with, BenchError, DlrmBench, LoopMode};
use super::run_ranks;
use crate::collective::{bls_init, BlsContext, CollectiveError};
use crate::transport::in_process::{self, DeliveryOptions};
use crate::transport::CommOptions;
use crate::workload::WorkloadKind;

pub const BOUNDS: [usize; 5] = [0, 1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        PropertyResult {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// Small model that runs in milliseconds.
pub fn small_bench(ranks: usize, workload: WorkloadKind, seed: u64) -> DlrmBench {
    DlrmBench {
        ranks,
        workload,
        mode: LoopMode::Sync,
        bound_k: 0,
        batches: 6,
        batch_size: 16,
        emb_dim: 4,
        tables: 8.max(ranks),
        rows_per_table: 50,
        hidden: 8,
        max_multiplicity: 6,
        seed,
        runs: 1,
        delivery: DeliveryOptions::seeded(seed),
        op_timeout: Some(Duration::from_secs(60)),
        ..DlrmBench::default()
    }
}

/// Outcome of comparing every bound against the synchronous loop.
#[derive(Debug, Clone, Default)]
pub struct Equivalence {
    pub mismatched_bounds: Vec<usize>,
    pub worst_lag: Vec<(usize, u64)>,
    pub conservation_ok: bool,
}

pub fn equivalence(base: &DlrmBench, bounds: &[usize]) -> Result<Equivalence, BenchError> {
    base.validate()?;
    let workload = base.workload_spec().generate(base.ranks)?;
    let sync = run_in_process_with(
        &DlrmBench {
            mode: LoopMode::Sync,
            ..base.clone()
        },
        &workload,
    )?;
    let reference = sync.predictions();
    let mut eq = Equivalence {
        conservation_ok: conserved(&sync.records),
        ..Default::default()
    };
    eq.worst_lag.push((0, sync.lag.max_lag));
    for &k in bounds {
        let bench = DlrmBench {
            mode: LoopMode::Bls,
            bound_k: k,
            ..base.clone()
        };
        let r = run_in_process_with(&bench, &workload)?;
        if r.predictions() != reference {
            eq.mismatched_bounds.push(k);
        }
        if !r.lag.pass {
            eq.worst_lag.push((k, r.lag.max_lag));
        }
        eq.conservation_ok &= conserved(&r.records);
    }
    eq.worst_lag.retain(|&(k, l)| l > k as u64 + 1);
    Ok(eq)
}

fn conserved(records: &[super::dlrm::RankRecord]) -> bool {
    records.iter().all(|src| {
        records
            .iter()
            .all(|dst| src.rank == dst.rank || src.stats.bytes_put_to[dst.rank] == dst.stats.bytes_applied_from[src.rank])
    })
}

fn test_segment(me: usize, q: usize, it: u64) -> Vec<u8> {
    let len = (me * 5 + q * 3 + it as usize) % 17;
    (0..len).map(|i| (me * 64 + q * 8 + i) as u8 ^ it as u8).collect()
}

/// Initiate, optionally wait while more than `k` requests are outstanding,
/// drain. Checks FIFO order and contents; returns the initiation trace.
fn guard_loop(ctx: &mut BlsContext, k: usize, iters: u64, sleeps: &[Duration]) -> Result<Vec<LagEvent>, CollectiveError> {
    let (me, n) = (ctx.rank(), ctx.size());
    let mut next = 0u64;
    let check = |r: &crate::collective::RecvResult, next: u64| {
        assert_eq!(r.iteration, next, "completion out of order");
        for (q, s) in r.segments.iter().enumerate() {
            assert_eq!(s, &test_segment(q, me, r.iteration), "corrupt segment");
        }
    };
    for it in 0..iters {
        if let Some(d) = sleeps.get(it as usize).filter(|d| !d.is_zero()) {
            thread::sleep(*d);
        }
        let send: Vec<Vec<u8>> = (0..n).map(|q| test_segment(me, q, it)).collect();
        let lens: Vec<usize> = (0..n).map(|q| test_segment(q, me, it).len()).collect();
        ctx.alltoallv_initiate(&send, &lens)?;
        if ctx.outstanding() > k {
            check(&ctx.alltoallv_wait()?, next);
            next += 1;
        }
    }
    for r in ctx.drain()? {
        check(&r, next);
        next += 1;
    }
    Ok(ctx.take_trace())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduleOutcome {
    pub schedules: u64,
    pub hazards: u64,
    pub lag_violations: u64,
    pub other_errors: Vec<String>,
}

/// Random acked-mode schedules: rank count, bound, slot count, per-body
/// sleeps and delivery order all drawn from the seed.
pub fn acked_schedules(first_seed: u64, count: u64, max_ranks: usize) -> ScheduleOutcome {
    let mut out = ScheduleOutcome::default();
    for seed in first_seed..first_seed + count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=max_ranks.max(2));
        let k = rng.gen_range(0..=3usize);
        let slots = rng.gen_range(k + 1..=2 * k + 2);
        let iters = rng.gen_range(4..=10u64);
        let sleeps: Vec<Vec<Duration>> = (0..n)
            .map(|_| {
                (0..iters)
                    .map(|_| if rng.gen_bool(0.15) { Duration::from_micros(rng.gen_range(0..300)) } else { Duration::ZERO })
                    .collect()
            })
            .collect();
        let delivery = DeliveryOptions {
            seed: Some(seed),
            max_delay: if seed % 10 == 0 { Duration::from_micros(100) } else { Duration::ZERO },
        };
        out.schedules += 1;
        let comms = match in_process::create(n, delivery, CommOptions::default()) {
            Ok(c) => c,
            Err(e) => {
                out.other_errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        let res = run_ranks(comms, |c| {
            let me = c.rank();
            let mut ctx = bls_init(c, BlsConfig::new(k, SafetyMode::Acked, 64).with_slot_count(slots))?;
            ctx.set_timeout(Some(Duration::from_secs(30)));
            let t = guard_loop(&mut ctx, k, iters, &sleeps[me])?;
            ctx.fence()?;
            Ok::<_, CollectiveError>(t)
        });
        let mut traces = Vec::new();
        let mut hazard = false;
        for r in res {
            match r {
                Ok(t) => traces.push(t),
                Err(e) if e.is_hazard() => hazard = true,
                Err(e) => out.other_errors.push(format!("seed {seed}: {e}")),
            }
        }
        if hazard {
            out.hazards += 1;
        }
        if traces.len() == n && !check_lag(&traces, k as u64).pass {
            out.lag_violations += 1;
        }
    }
    out
}

/// Faithful mode with three slots: rank 1 stalls after initiating iteration
/// 0 while rank 0 runs ahead to iteration 3, which reuses slot 0 before rank
/// 1 has copied iteration 0 out. Returns what rank 1's wait reported.
pub fn faithful_hazard_demo() -> Result<HazardError, String> {
    let comms = in_process::create(2, DeliveryOptions::default(), CommOptions::default()).map_err(|e| e.to_string())?;
    let (tx, rx) = mpsc::channel::<()>();
    let rx = Mutex::new(rx);
    let tx = Mutex::new(tx);
    let cfg = BlsConfig::new(2, SafetyMode::Faithful, 64).with_slot_count(3);
    let res = run_ranks(comms, |c| -> Result<Option<Result<(), CollectiveError>>, CollectiveError> {
        let mut ctx = bls_init(c, cfg)?;
        ctx.set_timeout(Some(Duration::from_secs(10)));
        let seg = |it: u64| [vec![it as u8; 4], vec![it as u8; 4]];
        if ctx.rank() == 0 {
            for it in 0..3 {
                ctx.alltoallv_initiate(&seg(it), &[4, 4])?;
            }
            ctx.alltoallv_wait()?;
            ctx.alltoallv_initiate(&seg(3), &[4, 4])?;
            tx.lock().expect("sender").send(()).ok();
            Ok(None)
        } else {
            ctx.alltoallv_initiate(&seg(0), &[4, 4])?;
            rx.lock().expect("receiver").recv().ok();
            while ctx.comm().stamp(0, 0) != Some(3) {
                thread::sleep(Duration::from_millis(1));
            }
            Ok(Some(ctx.alltoallv_wait().map(|_| ())))
        }
    });
    match res.into_iter().nth(1) {
        Some(Ok(Some(Err(CollectiveError::Hazard(h))))) => Ok(h),
        Some(Ok(Some(Ok(())))) => Err("overwritten slot was consumed silently".into()),
        other => Err(format!("schedule did not run as constructed: {other:?}")),
    }
}

/// The full suite for each seed on `ranks` ranks.
pub fn run_suite(ranks: usize, seeds: &[u64]) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    for &seed in seeds {
        for kind in [WorkloadKind::Balanced, WorkloadKind::Hetero] {
            let name = |p: &str| format!("{p} [ranks={ranks} seed={seed} workload={kind}]");
            match equivalence(&small_bench(ranks, kind, seed), &BOUNDS) {
                Ok(eq) => {
                    out.push(PropertyResult::new(
                        name("equivalence"),
                        eq.mismatched_bounds.is_empty(),
                        if eq.mismatched_bounds.is_empty() {
                            "bls predictions identical to sync for k in 0,1,2,4,8".to_string()
                        } else {
                            format!("predictions differ for k = {:?}", eq.mismatched_bounds)
                        },
                    ));
                    out.push(PropertyResult::new(
                        name("lag"),
                        eq.worst_lag.is_empty(),
                        if eq.worst_lag.is_empty() {
                            "max lag within k + 1".to_string()
                        } else {
                            format!("(k, lag) violations {:?}", eq.worst_lag)
                        },
                    ));
                    out.push(PropertyResult::new(
                        name("conservation"),
                        eq.conservation_ok,
                        "bytes put equal bytes applied per pair",
                    ));
                }
                Err(e) => out.push(PropertyResult::new(name("equivalence"), false, e.to_string())),
            }
        }
        let s = acked_schedules(seed * 1_000, 100, ranks.clamp(2, 4));
        out.push(PropertyResult::new(
            format!("acked safety [seed={seed}]"),
            s.hazards == 0 && s.lag_violations == 0 && s.other_errors.is_empty(),
            format!(
                "{} schedules, {} hazards, {} lag violations, {} errors",
                s.schedules,
                s.hazards,
                s.lag_violations,
                s.other_errors.len()
            ),
        ));
    }
    match faithful_hazard_demo() {
        Ok(h) => out.push(PropertyResult::new("faithful hazard detection", true, h.to_string())),
        Err(e) => out.push(PropertyResult::new("faithful hazard detection", false, e)),
    }
    out
}
