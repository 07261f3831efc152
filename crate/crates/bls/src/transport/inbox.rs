//! Receive-side state of one rank: registered windows, tag counters and the
//! control mailbox. Backends deliver frames here; the owning rank reads.
//!
//! One mutex covers a whole inbox, so a frame's payload bytes, its slot stamp
//! and its tag count become visible together.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bls_core::frame::{FrameHeader, ACK_TAG};
use bls_core::request::{check_stamps, HazardError, TagCounter};
use bls_core::window::{decode_segment, WindowLayout};
use bls_core::{RankId, Tag};

use super::TransportError;

/// A put as it travels between ranks.
#[derive(Debug, Clone)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<u8>,
}

pub(crate) struct DataWindow {
    pub layout: WindowLayout,
    pub bytes: Vec<u8>,
    /// `stamps[slot][source]`: iteration of the last put applied there.
    pub stamps: Vec<Vec<Option<u64>>>,
}

pub(crate) struct ControlEntry {
    pub kind: u16,
    pub payload: Vec<u8>,
    /// Bytes applied from the sender when this frame arrived.
    pub applied_bytes: u64,
}

#[derive(Default)]
pub(crate) struct InboxState {
    pub data: Option<DataWindow>,
    pub acks: Option<Vec<Option<u64>>>,
    pub counts: TagCounter,
    pub control: BTreeMap<u64, Vec<Option<ControlEntry>>>,
    pub applied_bytes_from: Vec<u64>,
    pub applied_msgs_from: Vec<u64>,
    pub last_stamp_from: Vec<Option<u64>>,
    pub order_violations: u64,
    pub closed: Vec<bool>,
    pub failed: Option<String>,
}

pub(crate) struct Inbox {
    pub size: usize,
    state: Mutex<InboxState>,
    cond: Condvar,
}

pub(crate) enum Wait<T> {
    Ready(T),
    Pending,
}

impl Inbox {
    pub fn new(size: usize) -> Self {
        Inbox {
            size,
            state: Mutex::new(InboxState {
                applied_bytes_from: vec![0; size],
                applied_msgs_from: vec![0; size],
                last_stamp_from: vec![None; size],
                closed: vec![false; size],
                ..Default::default()
            }),
            cond: Condvar::new(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, InboxState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn install_data_window(&self, layout: WindowLayout) {
        let mut st = self.lock();
        st.data = Some(DataWindow {
            layout,
            bytes: prefaulted(layout.total_bytes()),
            stamps: vec![vec![None; layout.comm_size]; layout.slot_count],
        });
    }

    pub fn install_ack_window(&self) {
        self.lock().acks = Some(vec![None; self.size]);
    }

    pub fn fail(&self, why: String) {
        let mut st = self.lock();
        st.failed.get_or_insert(why);
        drop(st);
        self.cond.notify_all();
    }

    pub fn mark_closed(&self, source: RankId) {
        self.lock().closed[source] = true;
        self.cond.notify_all();
    }

    /// Apply a frame from `header.source`. `count` is false for self-puts.
    pub fn apply(&self, frame: Frame, count: bool) {
        let h = frame.header;
        let source = h.source as usize;
        let mut st = self.lock();
        if source >= self.size {
            st.failed.get_or_insert(format!("frame from unknown rank {source}"));
        } else if h.is_control() && h.tag == super::KIND_ABORT {
            let why = String::from_utf8_lossy(&frame.payload).into_owned();
            st.failed.get_or_insert(format!("rank {source} aborted: {why}"));
        } else if h.is_control() {
            let applied_bytes = st.applied_bytes_from[source];
            let size = self.size;
            let slot = st.control.entry(h.iteration).or_insert_with(|| (0..size).map(|_| None).collect());
            slot[source] = Some(ControlEntry {
                kind: h.tag,
                payload: frame.payload,
                applied_bytes,
            });
        } else if h.is_ack() {
            match st.acks.as_mut() {
                Some(acks) => {
                    acks[source] = Some(acks[source].map_or(h.iteration, |a| a.max(h.iteration)));
                }
                None => {
                    st.failed.get_or_insert(format!("ack from rank {source} before ack window registration"));
                }
            }
            st.applied_bytes_from[source] += frame.payload.len() as u64;
            st.applied_msgs_from[source] += 1;
            if count {
                st.counts.record(ACK_TAG);
            }
        } else {
            let len = frame.payload.len();
            let InboxState {
                data,
                failed,
                last_stamp_from,
                order_violations,
                ..
            } = &mut *st;
            let Some(win) = data.as_mut() else {
                failed.get_or_insert(format!("put from rank {source} before window registration"));
                drop(st);
                self.cond.notify_all();
                return;
            };
            let slot = h.slot as usize;
            if let Err(e) = win.layout.check_put(slot, h.offset as usize, len) {
                failed.get_or_insert(format!("invalid put from rank {source}: {e}"));
                drop(st);
                self.cond.notify_all();
                return;
            }
            let base = slot * win.layout.slot_bytes() + h.offset as usize;
            win.bytes[base..base + len].copy_from_slice(&frame.payload);
            win.stamps[slot][source] = Some(h.iteration);
            if matches!(last_stamp_from[source], Some(prev) if prev > h.iteration) {
                *order_violations += 1;
            }
            last_stamp_from[source] = Some(h.iteration);
            st.applied_bytes_from[source] += len as u64;
            st.applied_msgs_from[source] += 1;
            if count {
                st.counts.record(h.tag);
            }
        }
        drop(st);
        self.cond.notify_all();
    }

    /// Block until `poll` yields a value, the inbox fails, or `deadline` passes.
    /// On timeout `on_timeout` builds the error from the final state.
    pub fn wait_for<T>(
        &self,
        deadline: Option<Instant>,
        mut poll: impl FnMut(&mut InboxState) -> Result<Wait<T>, TransportError>,
        on_timeout: impl FnOnce(&InboxState) -> TransportError,
    ) -> Result<T, TransportError> {
        let mut st = self.lock();
        loop {
            if let Wait::Ready(v) = poll(&mut st)? {
                return Ok(v);
            }
            if let Some(why) = &st.failed {
                return Err(TransportError::Failed(why.clone()));
            }
            match deadline {
                None => st = self.cond.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(on_timeout(&st));
                    }
                    let wait = (d - now).min(Duration::from_millis(250));
                    st = self.cond.wait_timeout(st, wait).unwrap_or_else(|p| p.into_inner()).0;
                }
            }
        }
    }

    pub fn await_count(&self, tag: Tag, n: u64, deadline: Option<Instant>) -> Result<(), TransportError> {
        self.wait_for(
            deadline,
            |st| Ok(if st.counts.try_consume(tag, n) { Wait::Ready(()) } else { Wait::Pending }),
            |st| TransportError::Timeout {
                tag,
                observed: st.counts.count(tag),
                expected: n,
            },
        )
    }

    /// Copy every segment of `slot` after checking all stamps equal `iteration`.
    pub fn read_slot(&self, slot: usize, iteration: u64) -> Result<Result<Vec<Vec<u8>>, HazardError>, TransportError> {
        let st = self.lock();
        if let Some(why) = &st.failed {
            return Err(TransportError::Failed(why.clone()));
        }
        let win = st.data.as_ref().ok_or(TransportError::NotRegistered)?;
        if slot >= win.layout.slot_count {
            return Err(TransportError::InvalidArgument(format!("slot {slot} out of range")));
        }
        if let Err(h) = check_stamps(&win.stamps[slot], slot, iteration) {
            return Ok(Err(h));
        }
        let slot_bytes = win.layout.slot_bytes();
        let base = slot * slot_bytes;
        let mut out = Vec::with_capacity(win.layout.comm_size);
        for q in 0..win.layout.comm_size {
            let seg = &win.bytes[base + win.layout.segment_offset(q)..base + win.layout.segment_offset(q) + win.layout.per_peer_bytes];
            let payload = decode_segment(seg).map_err(TransportError::Segment)?;
            out.push(payload.to_vec());
        }
        Ok(Ok(out))
    }

    /// Raw copy of one slot region, for transport-level checks.
    pub fn read_raw(&self, slot: usize, offset: usize, len: usize) -> Result<Vec<u8>, TransportError> {
        let st = self.lock();
        let win = st.data.as_ref().ok_or(TransportError::NotRegistered)?;
        win.layout.check_put(slot, offset, len)?;
        let base = slot * win.layout.slot_bytes() + offset;
        Ok(win.bytes[base..base + len].to_vec())
    }

    pub fn stamp(&self, slot: usize, source: RankId) -> Option<u64> {
        let st = self.lock();
        st.data.as_ref().and_then(|w| w.stamps.get(slot).and_then(|s| s.get(source).copied().flatten()))
    }
}

/// Zeroed buffer with every page already touched, so the first puts into a
/// fresh window do not pay for page faults inside a timed loop.
fn prefaulted(len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    for i in (0..len).step_by(4096) {
        // Volatile so the store to already-zero memory is kept.
        unsafe { std::ptr::write_volatile(v.as_mut_ptr().add(i), 0) };
    }
    v
}
