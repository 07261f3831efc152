use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use bls::transport::in_process::{self, DeliveryOptions};
use bls::transport::{tcp, CommOptions, Communicator, PutDescriptor, TransportError};

fn opts() -> CommOptions {
    CommOptions {
        setup_timeout: Duration::from_secs(10),
        op_timeout: Some(Duration::from_secs(20)),
    }
}

fn comms(n: usize, delivery: DeliveryOptions) -> Vec<Communicator> {
    in_process::create(n, delivery, opts()).unwrap()
}

fn on_ranks<R: Send>(comms: Vec<Communicator>, f: impl Fn(Communicator) -> R + Sync) -> Vec<R> {
    thread::scope(|s| {
        let hs: Vec<_> = comms.into_iter().map(|c| s.spawn(|| f(c))).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn put(c: &mut Communicator, dest: usize, slot: usize, offset: usize, tag: u16, it: u64, payload: Vec<u8>) {
    c.put(PutDescriptor {
        dest,
        slot,
        offset,
        tag,
        iteration: it,
        payload,
    })
    .unwrap();
}

fn tcp_comms(n: usize) -> Vec<Communicator> {
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let eps: Vec<String> = listeners.iter().map(|l| l.local_addr().unwrap().to_string()).collect();
    thread::scope(|s| {
        let hs: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(r, l)| {
                let eps = eps.clone();
                s.spawn(move || tcp::connect_with_listener(r, &eps, l, opts()).unwrap())
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn single_rank_is_local() {
    let mut c = comms(1, DeliveryOptions::default()).pop().unwrap();
    c.register_window(1, 64).unwrap();
    put(&mut c, 0, 0, 0, 0, 0, vec![7; 64]);
    assert_eq!(c.read_window(0, 0, 64).unwrap(), vec![7; 64]);
    assert_eq!(c.count(0), 0);
    c.fence().unwrap();
}

#[test]
fn window_shape_and_registration_errors() {
    let out = on_ranks(comms(8, DeliveryOptions::default()), |mut c| {
        let l = c.register_window(3, 4096).unwrap();
        assert_eq!((l.slot_count, l.comm_size, l.per_peer_bytes), (3, 8, 4096));
        assert_eq!(l.total_bytes(), 3 * 8 * 4096);
        let twice = c.register_window(3, 4096);
        assert!(matches!(twice, Err(TransportError::AlreadyRegistered)));
        let next = (c.rank() + 1) % 8;
        put(&mut c, next, 0, 0, 0, 0, vec![1]);
        matches!(c.register_ack_window(), Err(TransportError::CommunicationStarted))
    });
    assert!(out.into_iter().all(|x| x));

    let out = on_ranks(comms(8, DeliveryOptions::default()), |mut c| {
        let slots = if c.rank() == 5 { 2 } else { 3 };
        c.register_window(slots, 4096)
    });
    assert!(out.iter().all(|r| matches!(r, Err(TransportError::RegistrationMismatch { .. }))));
}

#[test]
fn put_lands_in_source_segment_and_counts() {
    on_ranks(comms(4, DeliveryOptions::default()), |mut c| {
        let l = c.register_window(2, 64).unwrap();
        if c.rank() == 0 {
            put(&mut c, 2, 1, l.segment_offset(0), 1, 0, (0..64).collect());
        }
        if c.rank() == 2 {
            c.await_count(1, 1, None).unwrap();
            assert_eq!(c.read_window(1, l.segment_offset(0), 64).unwrap(), (0..64).collect::<Vec<u8>>());
            assert_eq!(c.stamp(1, 0), Some(0));
            assert_eq!(c.count(1), 0);
        }
        c.fence().unwrap();
    });
}

#[test]
fn invalid_puts_fail_locally() {
    let template = PutDescriptor {
        dest: 1,
        slot: 0,
        offset: 0,
        tag: 0,
        iteration: 0,
        payload: vec![0; 4],
    };
    let mut c = comms(2, DeliveryOptions::default()).remove(0);
    assert!(matches!(c.put(template.clone()), Err(TransportError::NotRegistered)));
    let out = on_ranks(comms(2, DeliveryOptions::default()), |mut c| {
        c.register_window(2, 16).unwrap();
        let mut d = template.clone();
        d.dest = 1 - c.rank();
        let mut bad = Vec::new();
        d.slot = 2;
        bad.push(c.put(d.clone()));
        d.slot = 1;
        d.offset = 30;
        bad.push(c.put(d.clone()));
        d.offset = 0;
        d.payload = vec![];
        bad.push(c.put(d.clone()));
        let mut far = d.clone();
        far.dest = 2;
        far.payload = vec![1];
        bad.push(c.put(far));
        d.payload = vec![1];
        d.iteration = 5;
        c.put(d.clone()).unwrap();
        d.iteration = 4;
        bad.push(c.put(d));
        c.fence().unwrap();
        bad.iter().all(|r| r.is_err())
    });
    assert_eq!(out, vec![true, true]);
}

#[test]
fn await_count_on_eight_ranks() {
    on_ranks(comms(8, DeliveryOptions::seeded(3)), |mut c| {
        let l = c.register_window(1, 8).unwrap();
        let me = c.rank();
        for q in 0..8 {
            put(&mut c, q, 0, l.segment_offset(me), 0, 0, vec![me as u8; 8]);
        }
        c.await_count(0, 7, Some(Duration::from_secs(10))).unwrap();
        c.await_count(3, 0, Some(Duration::ZERO)).unwrap();
        for q in 0..8 {
            assert_eq!(c.read_window(0, l.segment_offset(q), 8).unwrap(), vec![q as u8; 8]);
        }
        c.fence().unwrap();
    });
}

#[test]
fn partial_schedule_times_out_with_observed_count() {
    let out = on_ranks(comms(8, DeliveryOptions::default()), |mut c| {
        let l = c.register_window(1, 8).unwrap();
        let me = c.rank();
        if (1..=6).contains(&me) {
            put(&mut c, 0, 0, l.segment_offset(me), 0, 0, vec![1; 8]);
        }
        let r = if me == 0 {
            let t = Instant::now();
            let r = c.await_count(0, 7, Some(Duration::from_millis(100)));
            assert!(t.elapsed() >= Duration::from_millis(100));
            Some(r)
        } else {
            None
        };
        c.fence().unwrap();
        r
    });
    match &out[0] {
        Some(Err(TransportError::Timeout { tag: 0, observed: 6, expected: 7 })) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn interleaved_offsets_land_correctly_under_random_delivery() {
    for seed in 0..40 {
        let d = DeliveryOptions {
            seed: Some(seed),
            max_delay: Duration::from_micros(if seed % 4 == 0 { 200 } else { 0 }),
        };
        on_ranks(comms(4, d), |mut c| {
            let l = c.register_window(1, 256).unwrap();
            let me = c.rank();
            let seg = l.segment_offset(me);
            for q in 0..4 {
                if q != me {
                    for part in 0..4u8 {
                        let payload = vec![me as u8 * 16 + part; 64];
                        put(&mut c, q, 0, seg + part as usize * 64, 0, part as u64, payload);
                    }
                }
            }
            c.await_count(0, 12, None).unwrap();
            for q in (0..4).filter(|&q| q != me) {
                for part in 0..4u8 {
                    let got = c.read_window(0, l.segment_offset(q) + part as usize * 64, 64).unwrap();
                    assert_eq!(got, vec![q as u8 * 16 + part; 64]);
                }
            }
            c.fence().unwrap();
            assert_eq!(c.stats().order_violations, 0);
        });
    }
}

fn checksum(b: &[u8]) -> u64 {
    b.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &x| (h ^ x as u64).wrapping_mul(0x100_0000_01b3))
}

#[test]
fn payload_visible_before_count() {
    // each source writes a new segment per message; whenever the count says c
    // messages arrived, the first c segments of every source must check out
    let n = 4;
    let msgs = 30;
    on_ranks(
        comms(
            n,
            DeliveryOptions {
                seed: Some(11),
                max_delay: Duration::from_micros(50),
            },
        ),
        |mut c| {
            let seg_bytes = 8 * msgs;
            let l = c.register_window(1, seg_bytes).unwrap();
            let me = c.rank();
            let body = |src: usize, i: usize| -> Vec<u8> { ((src * 1000 + i) as u64).to_le_bytes().to_vec() };
            for i in 0..msgs {
                for q in (0..n).filter(|&q| q != me) {
                    put(&mut c, q, 0, l.segment_offset(me) + 8 * i, 0, i as u64, body(me, i));
                }
            }
            for _ in 0..msgs * (n - 1) {
                c.await_count(0, 1, None).unwrap();
                let applied = c.stats().msgs_applied_from;
                for src in (0..n).filter(|&q| q != me) {
                    for i in 0..applied[src] as usize {
                        let got = c.read_window(0, l.segment_offset(src) + 8 * i, 8).unwrap();
                        assert_eq!(checksum(&got), checksum(&body(src, i)));
                    }
                }
            }
            c.fence().unwrap();
            let s = c.stats();
            assert_eq!(s.order_violations, 0);
            assert!(s.msgs_applied_from.iter().enumerate().all(|(q, &m)| q == me || m == msgs as u64));
        },
    );
}

#[test]
fn fence_waits_for_the_slowest_rank() {
    let out = on_ranks(comms(8, DeliveryOptions::default()), |mut c| {
        c.register_window(1, 8).unwrap();
        if c.rank() == 3 {
            thread::sleep(Duration::from_millis(50));
        }
        let t = Instant::now();
        c.fence().unwrap();
        (c.rank(), t.elapsed())
    });
    for (r, dt) in out {
        if r != 3 {
            assert!(dt >= Duration::from_millis(45), "rank {r} left the fence after {dt:?}");
        }
    }
}

#[test]
fn failure_is_sticky() {
    on_ranks(comms(2, DeliveryOptions::default()), |mut c| {
        c.register_window(1, 8).unwrap();
        c.fence().unwrap();
        if c.rank() == 1 {
            c.inject_failure("link down");
            assert!(c.is_failed());
            let e = c.put(PutDescriptor {
                dest: 0,
                slot: 0,
                offset: 0,
                tag: 0,
                iteration: 0,
                payload: vec![1],
            });
            assert!(matches!(e, Err(TransportError::Failed(_))));
            assert!(matches!(c.await_count(0, 0, None), Err(TransportError::Failed(_))));
            assert!(matches!(c.fence(), Err(TransportError::Failed(_))));
        }
    });
}

/// Same schedule run on either backend; returns each rank's window bytes,
/// stamps and counters after the final fence.
fn schedule(mut c: Communicator) -> (Vec<u8>, Vec<Option<u64>>, Vec<u64>) {
    let n = c.size();
    let me = c.rank();
    let l = c.register_window(2, 32).unwrap();
    for it in 0..6u64 {
        let slot = (it % 2) as usize;
        for q in 0..n {
            let len = 1 + (me * 7 + q * 3 + it as usize) % 32;
            let payload: Vec<u8> = (0..len).map(|i| (me * 31 + q * 7 + i + it as usize) as u8).collect();
            put(&mut c, q, slot, l.segment_offset(me), slot as u16, it, payload);
        }
        c.await_count(slot as u16, (n - 1) as u64, None).unwrap();
        c.fence().unwrap();
    }
    let bytes = c.read_window(0, 0, l.slot_bytes()).unwrap().into_iter().chain(c.read_window(1, 0, l.slot_bytes()).unwrap()).collect();
    let stamps = (0..2).flat_map(|s| (0..n).map(move |q| (s, q))).map(|(s, q)| c.stamp(s, q)).collect();
    let s = c.stats();
    c.fence().unwrap();
    (bytes, stamps, s.bytes_applied_from)
}

#[test]
fn tcp_loopback_round_trip_one_put_per_pair() {
    on_ranks(tcp_comms(4), |mut c| {
        let l = c.register_window(2, 16).unwrap();
        let me = c.rank();
        for q in (0..4).filter(|&q| q != me) {
            put(&mut c, q, 0, l.segment_offset(me), 0, 0, vec![(me * 4 + q) as u8; 16]);
        }
        c.await_count(0, 3, None).unwrap();
        // echo what arrived back to its sender in slot 1
        for q in (0..4).filter(|&q| q != me) {
            let got = c.read_window(0, l.segment_offset(q), 16).unwrap();
            put(&mut c, q, 1, l.segment_offset(me), 1, 1, got);
        }
        c.await_count(1, 3, None).unwrap();
        for q in (0..4).filter(|&q| q != me) {
            assert_eq!(c.read_window(1, l.segment_offset(q), 16).unwrap(), vec![(me * 4 + q) as u8; 16]);
        }
        c.fence().unwrap();
    });
}

#[test]
fn backends_are_observationally_equivalent() {
    let a = on_ranks(comms(4, DeliveryOptions::seeded(5)), schedule);
    let b = on_ranks(tcp_comms(4), schedule);
    assert_eq!(a, b);
}

#[test]
fn tcp_duplicate_rank_is_rejected() {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let eps = vec![l.local_addr().unwrap().to_string(), "127.0.0.1:1".into(), "127.0.0.1:1".into()];
    let addr = eps[0].clone();
    let fakes = thread::spawn(move || {
        let mut keep = Vec::new();
        for _ in 0..2 {
            let mut s = TcpStream::connect(&addr).unwrap();
            let mut hs = vec![0x42, 0x4C, 0x53, 0x21, 1];
            hs.extend_from_slice(&1u16.to_be_bytes());
            hs.extend_from_slice(&3u16.to_be_bytes());
            s.write_all(&hs).unwrap();
            keep.push(s);
        }
        thread::sleep(Duration::from_millis(300));
    });
    let r = tcp::connect_with_listener(0, &eps, l, opts());
    assert!(matches!(r, Err(TransportError::DuplicateRank(1))), "{r:?}");
    fakes.join().unwrap();
}

#[test]
fn tcp_setup_times_out() {
    let dead = TcpListener::bind("127.0.0.1:0").unwrap();
    let dead_addr = dead.local_addr().unwrap().to_string();
    drop(dead);
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let eps = vec![dead_addr, l.local_addr().unwrap().to_string()];
    let o = CommOptions {
        setup_timeout: Duration::from_millis(200),
        ..opts()
    };
    let t = Instant::now();
    let r = tcp::connect_with_listener(1, &eps, l, o);
    assert!(matches!(r, Err(TransportError::SetupTimeout(_))), "{r:?}");
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn tcp_peer_vanishing_fails_the_communicator() {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let fake = TcpListener::bind("127.0.0.1:0").unwrap();
    let eps = vec![l.local_addr().unwrap().to_string(), fake.local_addr().unwrap().to_string()];
    let addr = eps[0].clone();
    let peer = thread::spawn(move || {
        let mut s = TcpStream::connect(&addr).unwrap();
        let mut hs = vec![0x42, 0x4C, 0x53, 0x21, 1];
        hs.extend_from_slice(&1u16.to_be_bytes());
        hs.extend_from_slice(&2u16.to_be_bytes());
        s.write_all(&hs).unwrap();
        let mut buf = [0u8; 1];
        let _ = s.read(&mut buf);
        // drop without a goodbye frame
    });
    let mut c = tcp::connect_with_listener(0, &eps, l, opts()).unwrap();
    let r = c.register_window(1, 8);
    assert!(matches!(r, Err(TransportError::Failed(_))), "{r:?}");
    assert!(c.is_failed());
    peer.join().unwrap();
}
