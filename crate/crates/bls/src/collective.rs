//! Bounded-lag alltoallv: initiation puts every segment into the peers'
//! slot `iteration mod slot_count` and returns at once; completion waits for
//! the oldest outstanding request, checks iteration stamps and copies the
//! slot out.

use std::time::Duration;

use bls_core::config::{BlsConfig, ConfigError, SafetyMode};
use bls_core::metrics::LagEvent;
use bls_core::request::{HazardError, QueueError, RequestQueue};
use bls_core::window::{encode_segment, SegmentError};
use bls_core::{RankId, Tag};

use crate::transport::{Communicator, PutDescriptor, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum CollectiveError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Hazard(#[from] HazardError),
    #[error("request queue: {0:?}")]
    Queue(QueueError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("expected {expected} segments, got {got}")]
    SegmentCount { expected: usize, got: usize },
    #[error("iteration {iteration}: rank {peer} sent {got} B, {expected} B expected")]
    LengthMismatch {
        iteration: u64,
        peer: RankId,
        expected: usize,
        got: usize,
    },
    #[error("blocking exchange needs an empty request queue, {0} requests are outstanding")]
    Outstanding(usize),
}

impl From<QueueError> for CollectiveError {
    fn from(e: QueueError) -> Self {
        CollectiveError::Queue(e)
    }
}

impl CollectiveError {
    pub fn is_hazard(&self) -> bool {
        matches!(self, CollectiveError::Hazard(_))
    }

    pub fn is_timeout(&self) -> bool {
        matches!(self, CollectiveError::Transport(e) if e.is_timeout())
    }
}

/// Handle returned by initiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestHandle {
    pub iteration: u64,
    pub tag: Tag,
}

/// Copied-out result of one exchange; `segments[q]` came from rank `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecvResult {
    pub iteration: u64,
    pub segments: Vec<Vec<u8>>,
}

pub struct BlsContext {
    comm: Communicator,
    config: BlsConfig,
    queue: RequestQueue,
    trace: Vec<LagEvent>,
    timeout: Option<Duration>,
}

/// Register the slot window (and the ack window in acked mode). Collective.
pub fn bls_init(mut comm: Communicator, config: BlsConfig) -> Result<BlsContext, CollectiveError> {
    config.validate()?;
    comm.register_window(config.slot_count, config.per_peer_bytes)?;
    if config.safety_mode == SafetyMode::Acked {
        comm.register_ack_window()?;
    }
    let timeout = comm.options().op_timeout;
    Ok(BlsContext {
        comm,
        queue: RequestQueue::new(config.slot_count),
        config,
        trace: Vec::new(),
        timeout,
    })
}

impl BlsContext {
    pub fn config(&self) -> &BlsConfig {
        &self.config
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn comm_mut(&mut self) -> &mut Communicator {
        &mut self.comm
    }

    pub fn into_comm(self) -> Communicator {
        self.comm
    }

    pub fn rank(&self) -> RankId {
        self.comm.rank()
    }

    pub fn size(&self) -> usize {
        self.comm.size()
    }

    pub fn outstanding(&self) -> usize {
        self.queue.outstanding()
    }

    pub fn next_iteration(&self) -> u64 {
        self.queue.next_iteration()
    }

    /// Deadline for every blocking step; `None` waits forever.
    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    /// Initiation times of every request issued so far.
    pub fn trace(&self) -> &[LagEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<LagEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn alltoallv_initiate<S: AsRef<[u8]>>(
        &mut self,
        send_segments: &[S],
        recv_lengths: &[usize],
    ) -> Result<RequestHandle, CollectiveError> {
        let n = self.comm.size();
        for got in [send_segments.len(), recv_lengths.len()] {
            if got != n {
                return Err(CollectiveError::SegmentCount { expected: n, got });
            }
        }
        let encoded = send_segments
            .iter()
            .map(|s| encode_segment(s.as_ref(), self.config.per_peer_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        self.queue.can_initiate()?;
        let iteration = self.queue.next_iteration();
        let slots = self.config.slot_count as u64;
        if self.config.safety_mode == SafetyMode::Acked && iteration >= slots {
            self.comm.wait_acks(iteration - slots, self.timeout)?;
        }
        self.trace.push(LagEvent {
            iteration,
            t_ns: self.comm.now_ns(),
        });
        let slot = (iteration % slots) as usize;
        let offset = self.comm.layout().ok_or(TransportError::NotRegistered)?.segment_offset(self.comm.rank());
        let send_lengths = send_segments.iter().map(|s| s.as_ref().len()).collect();
        for (dest, seg) in encoded.into_iter().enumerate() {
            self.comm.put(PutDescriptor {
                dest,
                slot,
                offset,
                tag: slot as Tag,
                iteration,
                payload: seg,
            })?;
        }
        let req = self.queue.initiate(send_lengths, recv_lengths.to_vec())?;
        Ok(RequestHandle {
            iteration: req.iteration,
            tag: req.tag,
        })
    }

    /// Complete the oldest outstanding request.
    pub fn alltoallv_wait(&mut self) -> Result<RecvResult, CollectiveError> {
        let (iteration, tag, recv_lengths) = {
            let tail = self.queue.tail().ok_or(QueueError::Empty)?;
            (tail.iteration, tail.tag, tail.recv_lengths.clone())
        };
        let n = self.comm.size();
        self.comm.await_count(tag, (n - 1) as u64, self.timeout)?;
        let segments = self.comm.read_slot(tag as usize, iteration)??;
        for (source, (seg, &expected)) in segments.iter().zip(&recv_lengths).enumerate() {
            if seg.len() != expected {
                return Err(CollectiveError::LengthMismatch {
                    iteration,
                    peer: source,
                    expected,
                    got: seg.len(),
                });
            }
        }
        if self.config.safety_mode == SafetyMode::Acked {
            self.comm.send_acks(iteration)?;
        }
        self.queue.pop_completed()?;
        Ok(RecvResult { iteration, segments })
    }

    /// Complete every outstanding request in order.
    pub fn drain(&mut self) -> Result<Vec<RecvResult>, CollectiveError> {
        let mut out = Vec::with_capacity(self.queue.outstanding());
        while self.queue.outstanding() > 0 {
            out.push(self.alltoallv_wait()?);
        }
        Ok(out)
    }

    pub fn fence(&mut self) -> Result<(), CollectiveError> {
        Ok(self.comm.fence()?)
    }
}

/// Blocking linear exchange: one round on the context's slots followed by a
/// fence, so no rank starts another exchange before every peer copied out.
pub fn ref_alltoallv<S: AsRef<[u8]>>(
    ctx: &mut BlsContext,
    send_segments: &[S],
    recv_lengths: &[usize],
) -> Result<RecvResult, CollectiveError> {
    if ctx.outstanding() > 0 {
        return Err(CollectiveError::Outstanding(ctx.outstanding()));
    }
    ctx.alltoallv_initiate(send_segments, recv_lengths)?;
    let r = ctx.alltoallv_wait()?;
    ctx.fence()?;
    Ok(r)
}
