use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use bls::collective::{bls_init, ref_alltoallv, BlsContext, CollectiveError, RecvResult};
use bls::transport::in_process::{self, DeliveryOptions};
use bls::transport::{CommOptions, Communicator, TransportError};
use bls_core::config::{BlsConfig, SafetyMode};
use bls_core::metrics::check_lag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts() -> CommOptions {
    CommOptions {
        setup_timeout: Duration::from_secs(10),
        op_timeout: Some(Duration::from_secs(20)),
    }
}

fn comms(n: usize, d: DeliveryOptions) -> Vec<Communicator> {
    in_process::create(n, d, opts()).unwrap()
}

fn on_ranks<R: Send>(comms: Vec<Communicator>, f: impl Fn(Communicator) -> R + Sync) -> Vec<R> {
    thread::scope(|s| {
        let hs: Vec<_> = comms.into_iter().map(|c| s.spawn(|| f(c))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// Segment rank `me` sends to `q` in iteration `it`; lengths vary per pair.
fn seg(me: usize, q: usize, it: u64) -> Vec<u8> {
    let len = (me * 5 + q * 3 + it as usize) % 17;
    (0..len).map(|i| (me * 64 + q * 8 + i) as u8 ^ it as u8).collect()
}

fn exchange(ctx: &mut BlsContext, it: u64) -> (Vec<Vec<u8>>, Vec<usize>) {
    let (me, n) = (ctx.rank(), ctx.size());
    let send = (0..n).map(|q| seg(me, q, it)).collect();
    let recv = (0..n).map(|q| seg(q, me, it).len()).collect();
    (send, recv)
}

fn check(r: &RecvResult, me: usize) {
    for (q, s) in r.segments.iter().enumerate() {
        assert_eq!(s, &seg(q, me, r.iteration), "iteration {} from {q}", r.iteration);
    }
}

#[test]
fn init_shapes() {
    on_ranks(comms(8, DeliveryOptions::default()), |c| {
        let ctx = bls_init(c, BlsConfig::new(3, SafetyMode::Faithful, 4096).with_slot_count(3)).unwrap();
        assert_eq!(ctx.comm().layout().unwrap().slot_count, 3);
    });
    on_ranks(comms(8, DeliveryOptions::default()), |c| {
        let ctx = bls_init(c, BlsConfig::new(0, SafetyMode::Faithful, 64)).unwrap();
        assert_eq!(ctx.comm().layout().unwrap().slot_count, 1);
    });
    on_ranks(comms(8, DeliveryOptions::default()), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(2, SafetyMode::Acked, 64).with_slot_count(3)).unwrap();
        assert_eq!(ctx.comm().layout().unwrap().slot_count, 3);
        assert!(matches!(ctx.comm_mut().register_ack_window(), Err(TransportError::AlreadyRegistered)));
    });
    let bad = comms(1, DeliveryOptions::default()).pop().unwrap();
    assert!(matches!(
        bls_init(bad, BlsConfig::new(1, SafetyMode::Faithful, 64).with_slot_count(0)),
        Err(CollectiveError::Config(_))
    ));
}

#[test]
fn tags_follow_iteration_modulo_slots() {
    on_ranks(comms(2, DeliveryOptions::default()), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(2, SafetyMode::Faithful, 64).with_slot_count(3)).unwrap();
        for it in 0..6u64 {
            let (s, r) = exchange(&mut ctx, it);
            let h = ctx.alltoallv_initiate(&s, &r).unwrap();
            assert_eq!((h.iteration, h.tag as u64), (it, it % 3));
            let me = ctx.rank();
            check(&ctx.alltoallv_wait().unwrap(), me);
            ctx.fence().unwrap();
        }
    });
}

#[test]
fn first_iteration_puts_once_per_peer() {
    on_ranks(comms(8, DeliveryOptions::seeded(1)), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(1, SafetyMode::Faithful, 64)).unwrap();
        let (s, r) = exchange(&mut ctx, 0);
        let h = ctx.alltoallv_initiate(&s, &r).unwrap();
        assert_eq!(h.tag, 0);
        assert!(ctx.comm().stats().msgs_put_to.iter().all(|&m| m == 1));
        let res = ctx.alltoallv_wait().unwrap();
        assert_eq!(res.segments.len(), 8);
        check(&res, ctx.rank());
        assert_eq!(ctx.comm().count(0), 0);
        ctx.fence().unwrap();
    });
}

#[test]
fn single_rank_completes_immediately() {
    let c = comms(1, DeliveryOptions::default()).pop().unwrap();
    let mut ctx = bls_init(c, BlsConfig::new(0, SafetyMode::Faithful, 64)).unwrap();
    ctx.alltoallv_initiate(&[b"self".to_vec()], &[4]).unwrap();
    let r = ctx.alltoallv_wait().unwrap();
    assert_eq!(r.segments, vec![b"self".to_vec()]);
    assert!(ctx.drain().unwrap().is_empty());
}

#[test]
fn fifo_order_and_drain() {
    on_ranks(comms(4, DeliveryOptions::seeded(9)), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(5, SafetyMode::Acked, 64)).unwrap();
        let me = ctx.rank();
        for it in 0..4 {
            let (s, r) = exchange(&mut ctx, it);
            ctx.alltoallv_initiate(&s, &r).unwrap();
            check(&ctx.alltoallv_wait().unwrap(), me);
        }
        for it in 4..6 {
            let (s, r) = exchange(&mut ctx, it);
            ctx.alltoallv_initiate(&s, &r).unwrap();
        }
        assert_eq!(ctx.alltoallv_wait().unwrap().iteration, 4);
        assert_eq!(ctx.alltoallv_wait().unwrap().iteration, 5);
        for it in 6..9 {
            let (s, r) = exchange(&mut ctx, it);
            ctx.alltoallv_initiate(&s, &r).unwrap();
        }
        let d = ctx.drain().unwrap();
        assert_eq!(d.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![6, 7, 8]);
        d.iter().for_each(|r| check(r, me));
        assert!(ctx.drain().unwrap().is_empty());
        assert!(matches!(ctx.alltoallv_wait(), Err(CollectiveError::Queue(_))));
        ctx.fence().unwrap();
    });
}

#[test]
fn too_many_outstanding_and_oversized_segments() {
    on_ranks(comms(2, DeliveryOptions::default()), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(1, SafetyMode::Faithful, 16).with_slot_count(2)).unwrap();
        let big = vec![vec![0u8; 13], vec![0u8; 13]];
        assert!(matches!(ctx.alltoallv_initiate(&big, &[0, 0]), Err(CollectiveError::Segment(_))));
        let ok = vec![vec![1u8; 12], vec![1u8; 12]];
        assert!(matches!(ctx.alltoallv_initiate(&ok[..1], &[12]), Err(CollectiveError::SegmentCount { .. })));
        ctx.alltoallv_initiate(&ok, &[12, 12]).unwrap();
        ctx.alltoallv_initiate(&ok, &[12, 12]).unwrap();
        assert!(matches!(ctx.alltoallv_initiate(&ok, &[12, 12]), Err(CollectiveError::Queue(_))));
        assert_eq!(ctx.drain().unwrap().len(), 2);
        ctx.fence().unwrap();
    });
}

#[test]
fn declared_length_mismatch_is_reported() {
    let out = on_ranks(comms(2, DeliveryOptions::default()), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(0, SafetyMode::Faithful, 16)).unwrap();
        let r = ctx.alltoallv_initiate(&[vec![1u8; 3], vec![2u8; 3]], &[3, 4]).map(|_| ());
        r.and_then(|_| ctx.alltoallv_wait().map(|_| ()))
    });
    assert!(out.iter().all(|r| matches!(r, Err(CollectiveError::LengthMismatch { got: 3, expected: 4, .. }))));
}

#[test]
fn hazard_fires_on_overwritten_slot() {
    let (tx, rx) = mpsc::channel::<()>();
    let rx = std::sync::Mutex::new(rx);
    let out = on_ranks(comms(2, DeliveryOptions::default()), |c| {
        let cfg = BlsConfig::new(2, SafetyMode::Faithful, 64).with_slot_count(3);
        let mut ctx = bls_init(c, cfg).unwrap();
        let seg = |it: u64| vec![vec![it as u8; 4], vec![it as u8; 4]];
        if ctx.rank() == 0 {
            for it in 0..3 {
                ctx.alltoallv_initiate(&seg(it), &[4, 4]).unwrap();
            }
            assert_eq!(ctx.alltoallv_wait().unwrap().iteration, 0);
            // slot 0 at rank 1 still holds iteration 0, unconsumed
            ctx.alltoallv_initiate(&seg(3), &[4, 4]).unwrap();
            tx.send(()).unwrap();
            None
        } else {
            ctx.alltoallv_initiate(&seg(0), &[4, 4]).unwrap();
            rx.lock().unwrap().recv().unwrap();
            while ctx.comm().stamp(0, 0) != Some(3) {
                thread::sleep(Duration::from_millis(1));
            }
            Some(ctx.alltoallv_wait())
        }
    });
    match &out[1] {
        Some(Err(CollectiveError::Hazard(h))) => {
            assert_eq!((h.source, h.slot, h.expected, h.observed), (0, 0, 0, Some(3)));
        }
        other => panic!("expected a hazard, got {other:?}"),
    }
}

#[test]
fn drain_after_peer_stops_times_out_on_missing_tag() {
    let out = on_ranks(comms(3, DeliveryOptions::default()), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(2, SafetyMode::Faithful, 64)).unwrap();
        ctx.set_timeout(Some(Duration::from_millis(150)));
        let me = ctx.rank();
        let iters = if me == 2 { 1 } else { 3 };
        for it in 0..iters {
            let (s, r) = exchange(&mut ctx, it);
            ctx.alltoallv_initiate(&s, &r).unwrap();
        }
        let res = ctx.drain();
        thread::sleep(Duration::from_millis(200));
        res.map(|v| v.len())
    });
    assert_eq!(out[2].as_ref().unwrap(), &1);
    for r in &out[..2] {
        match r {
            Err(CollectiveError::Transport(TransportError::Timeout { tag: 1, observed: 1, expected: 2 })) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn reference_exchange_identity_and_differential() {
    let refs = on_ranks(comms(8, DeliveryOptions::seeded(2)), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(0, SafetyMode::Faithful, 64)).unwrap();
        let me = ctx.rank();
        let stamp: Vec<Vec<u8>> = (0..8).map(|_| vec![me as u8; 4]).collect();
        let r = ref_alltoallv(&mut ctx, &stamp, &[4; 8]).unwrap();
        assert_eq!(r.segments, (0..8).map(|q| vec![q as u8; 4]).collect::<Vec<_>>());
        (1..20)
            .map(|it| {
                let (s, l) = exchange(&mut ctx, it);
                ref_alltoallv(&mut ctx, &s, &l).unwrap().segments
            })
            .collect::<Vec<_>>()
    });
    let bls0 = on_ranks(comms(8, DeliveryOptions::seeded(3)), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(0, SafetyMode::Acked, 64)).unwrap();
        let (s, l) = exchange(&mut ctx, 0);
        ctx.alltoallv_initiate(&s, &l).unwrap();
        ctx.alltoallv_wait().unwrap();
        let out = (1..20)
            .map(|it| {
                let (s, l) = exchange(&mut ctx, it);
                ctx.alltoallv_initiate(&s, &l).unwrap();
                ctx.alltoallv_wait().unwrap().segments
            })
            .collect::<Vec<_>>();
        ctx.fence().unwrap();
        out
    });
    assert_eq!(refs, bls0);
}

#[test]
fn reference_exchange_rejects_outstanding_requests() {
    on_ranks(comms(2, DeliveryOptions::default()), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(1, SafetyMode::Faithful, 64)).unwrap();
        let (s, l) = exchange(&mut ctx, 0);
        ctx.alltoallv_initiate(&s, &l).unwrap();
        assert!(matches!(ref_alltoallv(&mut ctx, &s, &l), Err(CollectiveError::Outstanding(1))));
        ctx.drain().unwrap();
        ctx.fence().unwrap();
    });
}

/// The forward-loop shape: initiate, compute, wait while more than `k`
/// requests are outstanding, then drain. Returns the initiation trace and the
/// largest number of requests left outstanding at the end of a body.
fn guard_loop(ctx: &mut BlsContext, k: usize, iters: u64, sleeps: &[Duration]) -> Result<usize, CollectiveError> {
    let me = ctx.rank();
    let mut next_done = 0;
    let mut max_left = 0;
    for it in 0..iters {
        thread::sleep(sleeps[it as usize]);
        let (s, l) = exchange(ctx, it);
        ctx.alltoallv_initiate(&s, &l)?;
        if ctx.outstanding() > k {
            let r = ctx.alltoallv_wait()?;
            assert_eq!(r.iteration, next_done);
            check(&r, me);
            next_done += 1;
        }
        max_left = max_left.max(ctx.outstanding());
    }
    for r in ctx.drain()? {
        assert_eq!(r.iteration, next_done);
        check(&r, me);
        next_done += 1;
    }
    assert_eq!(next_done, iters);
    Ok(max_left)
}

#[test]
fn acked_mode_never_hazards_over_seeded_schedules() {
    let schedules = 1000u64;
    for seed in 0..schedules {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=4);
        let k = rng.gen_range(0..=3);
        let slots = rng.gen_range(k + 1..=2 * k + 2);
        let iters = rng.gen_range(4..=10u64);
        let sleeps: Vec<Vec<Duration>> = (0..n)
            .map(|_| {
                (0..iters)
                    .map(|_| if rng.gen_bool(0.15) { Duration::from_micros(rng.gen_range(0..300)) } else { Duration::ZERO })
                    .collect()
            })
            .collect();
        let d = DeliveryOptions {
            seed: Some(seed),
            max_delay: if seed % 10 == 0 { Duration::from_micros(100) } else { Duration::ZERO },
        };
        let res = on_ranks(comms(n, d), |c| {
            let me = c.rank();
            let mut ctx = bls_init(c, BlsConfig::new(k, SafetyMode::Acked, 64).with_slot_count(slots))?;
            let left = guard_loop(&mut ctx, k, iters, &sleeps[me])?;
            ctx.fence()?;
            Ok::<_, CollectiveError>((left, ctx.take_trace()))
        });
        let mut traces = Vec::new();
        for r in res {
            match r {
                Ok((left, t)) => {
                    assert!(left <= k, "seed {seed}: {left} outstanding at body end with k={k}");
                    traces.push(t);
                }
                Err(e) => panic!("seed {seed} (n={n}, k={k}, slots={slots}): {e}"),
            }
        }
        let lag = check_lag(&traces, k as u64);
        assert!(lag.pass, "seed {seed}: lag {} > {}", lag.max_lag, lag.limit);
    }
}

#[test]
fn zero_bound_keeps_one_request_at_most() {
    let out = on_ranks(comms(4, DeliveryOptions::seeded(4)), |c| {
        let mut ctx = bls_init(c, BlsConfig::new(0, SafetyMode::Acked, 64)).unwrap();
        let left = guard_loop(&mut ctx, 0, 12, &[Duration::ZERO; 12]).unwrap();
        ctx.fence().unwrap();
        left
    });
    assert!(out.iter().all(|&l| l == 0));
}

#[test]
fn lag_stays_within_bound_plus_one_with_a_slow_rank() {
    for k in [0usize, 1, 3] {
        let res = on_ranks(comms(4, DeliveryOptions::default()), |c| {
            let me = c.rank();
            let mut ctx = bls_init(c, BlsConfig::new(k, SafetyMode::Acked, 64)).unwrap();
            let sleeps: Vec<Duration> =
                (0..16).map(|i| if me == 1 && i % 4 == 0 { Duration::from_millis(8) } else { Duration::ZERO }).collect();
            guard_loop(&mut ctx, k, 16, &sleeps).unwrap();
            ctx.fence().unwrap();
            ctx.take_trace()
        });
        let lag = check_lag(&res, k as u64);
        assert!(lag.pass, "k={k}: lag {}", lag.max_lag);
    }
}
