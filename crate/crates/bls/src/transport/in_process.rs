//! Ranks as threads of one process. Each destination has a delivery worker
//! that applies frames to its inbox; with a seed it picks which source to
//! serve next at random and may sleep before applying, so frames from
//! different sources interleave unpredictably while each (source, dest) pair
//! stays in order.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendKind, Clock, CommOptions, Communicator, Frame, Inbox, Link, TransportError};
use bls_core::RankId;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DeliveryOptions {
    /// Seed for randomized source selection; `None` applies in arrival order.
    pub seed: Option<u64>,
    /// Upper bound of a uniform random sleep before each application.
    pub max_delay: Duration,
}

impl DeliveryOptions {
    pub fn seeded(seed: u64) -> Self {
        DeliveryOptions {
            seed: Some(seed),
            max_delay: Duration::ZERO,
        }
    }
}

struct ChannelLink {
    senders: Vec<Option<Sender<Frame>>>,
}

impl Link for ChannelLink {
    fn send(&mut self, dest: RankId, frame: Frame) -> Result<(), TransportError> {
        let tx = self.senders[dest]
            .as_ref()
            .ok_or_else(|| TransportError::Failed("link closed".into()))?;
        tx.send(frame)
            .map_err(|_| TransportError::Failed(format!("delivery worker for rank {dest} is gone")))
    }

    fn close(&mut self) {
        for s in &mut self.senders {
            s.take();
        }
    }
}

fn deliver(inbox: Arc<Inbox>, rx: Receiver<Frame>, opts: DeliveryOptions, dest: RankId) {
    let size = inbox.size;
    let mut rng = opts.seed.map(|s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(dest as u64);
        r
    });
    let mut queues: Vec<VecDeque<(u64, Frame)>> = (0..size).map(|_| VecDeque::new()).collect();
    let mut pending = 0usize;
    let mut seq = 0u64;
    let mut push = |queues: &mut Vec<VecDeque<(u64, Frame)>>, f: Frame| {
        let src = (f.header.source as usize).min(size - 1);
        queues[src].push_back((seq, f));
        seq += 1;
    };
    loop {
        if pending == 0 {
            match rx.recv() {
                Ok(f) => {
                    push(&mut queues, f);
                    pending += 1;
                }
                Err(_) => return,
            }
        }
        while let Ok(f) = rx.try_recv() {
            push(&mut queues, f);
            pending += 1;
        }
        let src = match rng.as_mut() {
            Some(r) => {
                let live: Vec<usize> = (0..size).filter(|&q| !queues[q].is_empty()).collect();
                live[r.gen_range(0..live.len())]
            }
            None => (0..size)
                .filter(|&q| !queues[q].is_empty())
                .min_by_key(|&q| queues[q][0].0)
                .expect("pending > 0"),
        };
        let (_, frame) = queues[src].pop_front().expect("non-empty");
        pending -= 1;
        if let Some(r) = rng.as_mut() {
            if !opts.max_delay.is_zero() {
                thread::sleep(r.gen_range(Duration::ZERO..=opts.max_delay));
            }
        }
        inbox.apply(frame, true);
    }
}

/// All `comm_size` rank handles sharing one set of delivery workers.
pub fn create(comm_size: usize, delivery: DeliveryOptions, opts: CommOptions) -> Result<Vec<Communicator>, TransportError> {
    if comm_size == 0 || comm_size > u16::MAX as usize {
        return Err(TransportError::InvalidArgument(format!("comm_size {comm_size} out of range")));
    }
    let inboxes: Vec<Arc<Inbox>> = (0..comm_size).map(|_| Arc::new(Inbox::new(comm_size))).collect();
    let mut senders = Vec::with_capacity(comm_size);
    for (dest, inbox) in inboxes.iter().enumerate() {
        let (tx, rx) = mpsc::channel();
        let inbox = Arc::clone(inbox);
        thread::Builder::new()
            .name(format!("bls-deliver-{dest}"))
            .spawn(move || deliver(inbox, rx, delivery, dest))?;
        senders.push(tx);
    }
    let epoch = Instant::now();
    Ok(inboxes
        .into_iter()
        .enumerate()
        .map(|(rank, inbox)| {
            let link = ChannelLink {
                senders: senders
                    .iter()
                    .enumerate()
                    .map(|(q, s)| if q == rank { None } else { Some(s.clone()) })
                    .collect(),
            };
            Communicator::new(
                rank,
                comm_size,
                BackendKind::InProcess,
                inbox,
                Box::new(link),
                opts.clone(),
                Clock::Shared(epoch),
            )
        })
        .collect())
}
