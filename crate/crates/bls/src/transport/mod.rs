//! One-sided tagged put transport with local completion counting.
//!
//! A [`Communicator`] is one rank's handle. Puts land in the destination's
//! registered window and bump the destination's per-tag counter only after the
//! bytes are in place. Self-puts are synchronous local copies and are never
//! counted.

mod inbox;
pub mod in_process;
pub mod tcp;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use bls_core::frame::{FrameHeader, ACK_SLOT, ACK_TAG, CONTROL_SLOT};
use bls_core::request::HazardError;
use bls_core::window::{SegmentError, WindowLayout};
use bls_core::{RankId, Tag};

pub use inbox::Frame;
pub(crate) use inbox::Inbox;
use inbox::Wait;

pub const DEFAULT_SETUP_TIMEOUT: Duration = Duration::from_secs(30);
pub const TIMEOUT_ENV: &str = "BLS_COMM_TIMEOUT_MS";

const KIND_REGISTER: u16 = 1;
const KIND_ACK_REGISTER: u16 = 2;
const KIND_FENCE: u16 = 3;
/// Sent by a rank giving up, so peers fail instead of waiting out a timeout.
pub(crate) const KIND_ABORT: u16 = 4;
pub(crate) const KIND_GOODBYE: u16 = 0xFFFF;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("duplicate rank id {0} during setup")]
    DuplicateRank(RankId),
    #[error("setup timed out: {0}")]
    SetupTimeout(String),
    #[error("window already registered")]
    AlreadyRegistered,
    #[error("window registration after communication started")]
    CommunicationStarted,
    #[error("window not registered")]
    NotRegistered,
    #[error("rank {peer} registered a different window layout than rank {rank}")]
    RegistrationMismatch { rank: RankId, peer: RankId },
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("await timed out on tag {tag}: observed {observed} of {expected}")]
    Timeout { tag: Tag, observed: u64, expected: u64 },
    #[error("ack wait timed out for iteration {iteration}; missing ranks {missing:?}")]
    AckTimeout { iteration: u64, missing: Vec<RankId> },
    #[error("control exchange timed out waiting for ranks {missing:?}")]
    ControlTimeout { missing: Vec<RankId> },
    #[error("byte conservation violated: rank {peer} sent {sent} B, {applied} B applied here")]
    Conservation { peer: RankId, sent: u64, applied: u64 },
    #[error("communicator failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TransportError {
    pub fn is_timeout(&self) -> bool {
        matches!(
            self,
            TransportError::Timeout { .. }
                | TransportError::AckTimeout { .. }
                | TransportError::ControlTimeout { .. }
                | TransportError::SetupTimeout(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    InProcess,
    Tcp,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::InProcess => "in_process",
            BackendKind::Tcp => "tcp",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in_process" | "in-process" => Ok(BackendKind::InProcess),
            "tcp" => Ok(BackendKind::Tcp),
            _ => Err(format!("unknown backend {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommOptions {
    pub setup_timeout: Duration,
    /// Deadline applied to blocking calls given no explicit deadline.
    pub op_timeout: Option<Duration>,
}

impl Default for CommOptions {
    fn default() -> Self {
        CommOptions {
            setup_timeout: DEFAULT_SETUP_TIMEOUT,
            op_timeout: Some(Duration::from_secs(120)),
        }
    }
}

impl CommOptions {
    /// Defaults with the setup timeout taken from `BLS_COMM_TIMEOUT_MS` if set.
    pub fn from_env() -> Self {
        let mut o = CommOptions::default();
        if let Some(ms) = std::env::var(TIMEOUT_ENV).ok().and_then(|v| v.trim().parse::<u64>().ok()) {
            o.setup_timeout = Duration::from_millis(ms);
        }
        o
    }
}

/// One put as issued by the owner of a communicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutDescriptor {
    pub dest: RankId,
    pub slot: usize,
    pub offset: usize,
    pub tag: Tag,
    pub iteration: u64,
    pub payload: Vec<u8>,
}

/// Frame sink toward peers.
pub(crate) trait Link: Send {
    fn send(&mut self, dest: RankId, frame: Frame) -> Result<(), TransportError>;
    fn close(&mut self);
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Clock {
    Shared(Instant),
    Wall,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub bytes_put_to: Vec<u64>,
    pub msgs_put_to: Vec<u64>,
    pub bytes_applied_from: Vec<u64>,
    pub msgs_applied_from: Vec<u64>,
    pub order_violations: u64,
}

pub struct Communicator {
    rank: RankId,
    size: usize,
    backend: BackendKind,
    inbox: Arc<Inbox>,
    link: Box<dyn Link>,
    opts: CommOptions,
    clock: Clock,
    layout: Option<WindowLayout>,
    ack_window: bool,
    started: bool,
    control_gen: u64,
    bytes_put_to: Vec<u64>,
    msgs_put_to: Vec<u64>,
    last_stamp_to: Vec<Option<u64>>,
    failed: Option<String>,
}

impl fmt::Debug for Communicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Communicator")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .field("backend", &self.backend)
            .finish()
    }
}

/// Build every rank of an in-process communicator. TCP communicators are one
/// per process; see [`tcp::connect`].
pub fn create_comm(comm_size: usize, opts: in_process::DeliveryOptions) -> Result<Vec<Communicator>, TransportError> {
    in_process::create(comm_size, opts, CommOptions::from_env())
}

impl Communicator {
    pub(crate) fn new(
        rank: RankId,
        size: usize,
        backend: BackendKind,
        inbox: Arc<Inbox>,
        link: Box<dyn Link>,
        opts: CommOptions,
        clock: Clock,
    ) -> Self {
        Communicator {
            rank,
            size,
            backend,
            inbox,
            link,
            opts,
            clock,
            layout: None,
            ack_window: false,
            started: false,
            control_gen: 0,
            bytes_put_to: vec![0; size],
            msgs_put_to: vec![0; size],
            last_stamp_to: vec![None; size],
            failed: None,
        }
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn options(&self) -> &CommOptions {
        &self.opts
    }

    pub fn layout(&self) -> Option<&WindowLayout> {
        self.layout.as_ref()
    }

    /// Nanoseconds on a clock comparable across all ranks of this communicator.
    pub fn now_ns(&self) -> u64 {
        match self.clock {
            Clock::Shared(epoch) => epoch.elapsed().as_nanos() as u64,
            Clock::Wall => SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0),
        }
    }

    fn deadline(&self, d: Option<Duration>) -> Option<Instant> {
        d.or(self.opts.op_timeout).map(|d| Instant::now() + d)
    }

    fn check_ok(&self) -> Result<(), TransportError> {
        if let Some(why) = &self.failed {
            return Err(TransportError::Failed(why.clone()));
        }
        if let Some(why) = &self.inbox.lock().failed {
            return Err(TransportError::Failed(why.clone()));
        }
        Ok(())
    }

    fn poison(&mut self, e: TransportError) -> TransportError {
        if let TransportError::Failed(_) = e {
            return e;
        }
        let why = e.to_string();
        self.failed.get_or_insert(why.clone());
        self.inbox.fail(why);
        e
    }

    fn send(&mut self, dest: RankId, frame: Frame) -> Result<(), TransportError> {
        match self.link.send(dest, frame) {
            Ok(()) => Ok(()),
            Err(e) => Err(self.poison(e)),
        }
    }

    /// Exchange one value with every rank. Returns values indexed by rank
    /// together with the bytes applied from each sender before its value.
    fn allgather(&mut self, kind: u16, payload: Vec<u8>, deadline: Option<Instant>) -> Result<Vec<(Vec<u8>, u64)>, TransportError> {
        self.check_ok()?;
        let gen = self.control_gen;
        self.control_gen += 1;
        let header = FrameHeader {
            tag: kind,
            slot: CONTROL_SLOT,
            source: self.rank as u16,
            iteration: gen,
            offset: 0,
            length: payload.len() as u32,
        };
        for q in 0..self.size {
            if q != self.rank {
                self.send(
                    q,
                    Frame {
                        header,
                        payload: payload.clone(),
                    },
                )?;
            }
        }
        let me = self.rank;
        let size = self.size;
        let own = payload;
        let got = self.inbox.wait_for(
            deadline,
            |st| {
                let ready = match st.control.get(&gen) {
                    Some(v) => (0..size).all(|q| q == me || v[q].is_some()),
                    None => size == 1,
                };
                if !ready {
                    return Ok(Wait::Pending);
                }
                let mut entries = st.control.remove(&gen).unwrap_or_else(|| (0..size).map(|_| None).collect());
                let mut out = Vec::with_capacity(size);
                for (q, e) in entries.iter_mut().enumerate() {
                    if q == me {
                        out.push((own.clone(), 0));
                        continue;
                    }
                    let e = e.take().expect("checked above");
                    if e.kind != kind {
                        return Err(TransportError::Failed(format!(
                            "control mismatch: rank {q} sent kind {} while rank {me} expected {kind}",
                            e.kind
                        )));
                    }
                    out.push((e.payload, e.applied_bytes));
                }
                Ok(Wait::Ready(out))
            },
            |st| TransportError::ControlTimeout {
                missing: (0..size)
                    .filter(|&q| q != me && st.control.get(&gen).map_or(true, |v| v[q].is_none()))
                    .collect(),
            },
        );
        got.map_err(|e| self.poison(e))
    }

    /// Collective window allocation; acts as a barrier.
    pub fn register_window(&mut self, slot_count: usize, per_peer_bytes: usize) -> Result<WindowLayout, TransportError> {
        self.check_ok()?;
        if self.layout.is_some() {
            return Err(TransportError::AlreadyRegistered);
        }
        if self.started {
            return Err(TransportError::CommunicationStarted);
        }
        if slot_count == 0 || per_peer_bytes == 0 {
            return Err(TransportError::InvalidArgument("slot_count and per_peer_bytes must be positive".into()));
        }
        if slot_count >= CONTROL_SLOT as usize || per_peer_bytes.checked_mul(self.size).map_or(true, |b| b > u32::MAX as usize) {
            return Err(TransportError::InvalidArgument("window too large for the frame format".into()));
        }
        let layout = WindowLayout::new(self.size, slot_count, per_peer_bytes);
        self.inbox.install_data_window(layout);
        let deadline = Some(Instant::now() + self.opts.setup_timeout);
        let digests = self.allgather(KIND_REGISTER, layout.digest().to_be_bytes().to_vec(), deadline)?;
        let mine = layout.digest().to_be_bytes();
        if let Some(peer) = digests.iter().position(|(d, _)| d[..] != mine[..]) {
            return Err(TransportError::RegistrationMismatch { rank: self.rank, peer });
        }
        self.layout = Some(layout);
        Ok(layout)
    }

    /// Collective registration of the ack window used by flow control.
    pub fn register_ack_window(&mut self) -> Result<(), TransportError> {
        self.check_ok()?;
        if self.ack_window {
            return Err(TransportError::AlreadyRegistered);
        }
        if self.started {
            return Err(TransportError::CommunicationStarted);
        }
        self.inbox.install_ack_window();
        let deadline = Some(Instant::now() + self.opts.setup_timeout);
        self.allgather(KIND_ACK_REGISTER, Vec::new(), deadline)?;
        self.ack_window = true;
        Ok(())
    }

    pub fn put(&mut self, desc: PutDescriptor) -> Result<(), TransportError> {
        self.check_ok()?;
        let layout = self.layout.ok_or(TransportError::NotRegistered)?;
        if desc.dest >= self.size {
            return Err(TransportError::InvalidArgument(format!("destination {} out of range", desc.dest)));
        }
        layout.check_put(desc.slot, desc.offset, desc.payload.len())?;
        if matches!(self.last_stamp_to[desc.dest], Some(prev) if prev > desc.iteration) {
            return Err(TransportError::InvalidArgument(format!(
                "iteration stamp {} after {} toward rank {}",
                desc.iteration,
                self.last_stamp_to[desc.dest].unwrap_or(0),
                desc.dest
            )));
        }
        self.last_stamp_to[desc.dest] = Some(desc.iteration);
        self.started = true;
        let len = desc.payload.len() as u64;
        let frame = Frame {
            header: FrameHeader {
                tag: desc.tag,
                slot: desc.slot as u16,
                source: self.rank as u16,
                iteration: desc.iteration,
                offset: desc.offset as u32,
                length: len as u32,
            },
            payload: desc.payload,
        };
        self.bytes_put_to[desc.dest] += len;
        self.msgs_put_to[desc.dest] += 1;
        if desc.dest == self.rank {
            self.inbox.apply(frame, false);
            Ok(())
        } else {
            self.send(desc.dest, frame)
        }
    }

    /// Block until `n` tag-`tag` messages have arrived, then consume them.
    pub fn await_count(&mut self, tag: Tag, n: u64, deadline: Option<Duration>) -> Result<(), TransportError> {
        self.check_ok()?;
        let d = self.deadline(deadline);
        self.inbox.await_count(tag, n, d)
    }

    /// Current unconsumed count for `tag`.
    pub fn count(&self, tag: Tag) -> u64 {
        self.inbox.lock().counts.count(tag)
    }

    /// Collective barrier that also checks byte conservation: each rank
    /// compares what every peer says it sent here with what was applied here
    /// when the peer's fence message arrived.
    pub fn fence(&mut self) -> Result<(), TransportError> {
        self.check_ok()?;
        if self.size == 1 {
            return Ok(());
        }
        let mut payload = Vec::with_capacity(8 * self.size);
        for b in &self.bytes_put_to {
            payload.extend_from_slice(&b.to_be_bytes());
        }
        let deadline = self.deadline(None);
        let all = self.allgather(KIND_FENCE, payload, deadline)?;
        for (q, (p, applied)) in all.iter().enumerate() {
            if q == self.rank {
                continue;
            }
            let at = self.rank * 8;
            let sent = p
                .get(at..at + 8)
                .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| TransportError::Failed(format!("short fence payload from rank {q}")))?;
            if sent != *applied {
                let e = TransportError::Conservation {
                    peer: q,
                    sent,
                    applied: *applied,
                };
                return Err(self.poison(e));
            }
        }
        Ok(())
    }

    /// Send a consumption ack for `iteration` to every peer.
    pub fn send_acks(&mut self, iteration: u64) -> Result<(), TransportError> {
        self.check_ok()?;
        if !self.ack_window {
            return Err(TransportError::NotRegistered);
        }
        for q in 0..self.size {
            if q == self.rank {
                continue;
            }
            let frame = Frame {
                header: FrameHeader {
                    tag: ACK_TAG,
                    slot: ACK_SLOT,
                    source: self.rank as u16,
                    iteration,
                    offset: (self.rank * 8) as u32,
                    length: 8,
                },
                payload: iteration.to_be_bytes().to_vec(),
            };
            self.bytes_put_to[q] += 8;
            self.msgs_put_to[q] += 1;
            self.send(q, frame)?;
        }
        Ok(())
    }

    /// Block until every peer has acknowledged consuming `iteration`.
    pub fn wait_acks(&mut self, iteration: u64, deadline: Option<Duration>) -> Result<(), TransportError> {
        self.check_ok()?;
        if !self.ack_window {
            return Err(TransportError::NotRegistered);
        }
        let me = self.rank;
        let size = self.size;
        let d = self.deadline(deadline);
        let missing = move |acks: &Vec<Option<u64>>| -> Vec<RankId> {
            (0..size).filter(|&q| q != me && acks[q].map_or(true, |a| a < iteration)).collect()
        };
        self.inbox.wait_for(
            d,
            |st| {
                let acks = st.acks.as_ref().ok_or(TransportError::NotRegistered)?;
                Ok(if missing(acks).is_empty() { Wait::Ready(()) } else { Wait::Pending })
            },
            |st| TransportError::AckTimeout {
                iteration,
                missing: st.acks.as_ref().map(missing).unwrap_or_default(),
            },
        )
    }

    /// Copy all segments of `slot` if every source's stamp equals `iteration`.
    pub fn read_slot(&self, slot: usize, iteration: u64) -> Result<Result<Vec<Vec<u8>>, HazardError>, TransportError> {
        self.check_ok()?;
        self.inbox.read_slot(slot, iteration)
    }

    /// Raw bytes of this rank's own window.
    pub fn read_window(&self, slot: usize, offset: usize, len: usize) -> Result<Vec<u8>, TransportError> {
        self.inbox.read_raw(slot, offset, len)
    }

    /// Iteration stamp last applied into `(slot, segment(source))` here.
    pub fn stamp(&self, slot: usize, source: RankId) -> Option<u64> {
        self.inbox.stamp(slot, source)
    }

    pub fn stats(&self) -> TransportStats {
        let st = self.inbox.lock();
        TransportStats {
            bytes_put_to: self.bytes_put_to.clone(),
            msgs_put_to: self.msgs_put_to.clone(),
            bytes_applied_from: st.applied_bytes_from.clone(),
            msgs_applied_from: st.applied_msgs_from.clone(),
            order_violations: st.order_violations,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.check_ok().is_err()
    }

    /// Put the communicator into the failed state, as a broken link would.
    /// Tell every peer this rank is giving up, then fail locally. Best effort:
    /// send errors are ignored.
    pub fn abort(&mut self, why: &str) {
        for q in (0..self.size).filter(|&q| q != self.rank) {
            let frame = Frame {
                header: FrameHeader {
                    tag: KIND_ABORT,
                    slot: CONTROL_SLOT,
                    source: self.rank as u16,
                    iteration: u64::MAX,
                    offset: 0,
                    length: why.len() as u32,
                },
                payload: why.as_bytes().to_vec(),
            };
            let _ = self.link.send(q, frame);
        }
        self.inbox.fail(format!("aborted: {why}"));
    }

    pub fn inject_failure(&mut self, why: &str) {
        self.inbox.fail(why.to_string());
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        self.link.close();
    }
}
