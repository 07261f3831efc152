//! Request bookkeeping for the bounded-lag alltoallv.
//!
//! Requests are created in iteration order and completed strictly from the
//! tail (oldest first). Every request for iteration `j` uses tag and slot
//! `j mod slot_count`.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;
use core::fmt;

use crate::window::slot_for_iteration;
use crate::{RankId, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Initiated,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct A2ARequest {
    pub iteration: u64,
    pub tag: Tag,
    pub send_lengths: Vec<usize>,
    pub recv_lengths: Vec<usize>,
    pub state: RequestState,
}

impl A2ARequest {
    pub fn slot(&self) -> usize {
        self.tag as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueueError {
    /// Initiating would target the slot of a request this rank still holds.
    TooManyOutstanding { outstanding: usize, slot_count: usize },
    Empty,
}

impl fmt::Display for QueueError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueueError::TooManyOutstanding { outstanding, slot_count } => write!(
                f,
                "{outstanding} requests outstanding with {slot_count} slots; wait before initiating"
            ),
            QueueError::Empty => f.write_str("no outstanding request to wait on"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for QueueError {}

/// FIFO of outstanding requests at one rank.
#[derive(Debug, Clone)]
pub struct RequestQueue {
    slot_count: usize,
    next_iteration: u64,
    fifo: VecDeque<A2ARequest>,
}

impl RequestQueue {
    pub fn new(slot_count: usize) -> Self {
        assert!(slot_count > 0 && slot_count <= u16::MAX as usize);
        RequestQueue {
            slot_count,
            next_iteration: 0,
            fifo: VecDeque::new(),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn outstanding(&self) -> usize {
        self.fifo.len()
    }

    pub fn next_iteration(&self) -> u64 {
        self.next_iteration
    }

    /// Check that a new request may be started, without starting it.
    pub fn can_initiate(&self) -> Result<(), QueueError> {
        if self.fifo.len() >= self.slot_count {
            return Err(QueueError::TooManyOutstanding {
                outstanding: self.fifo.len(),
                slot_count: self.slot_count,
            });
        }
        Ok(())
    }

    /// Append a request for the next iteration.
    pub fn initiate(&mut self, send_lengths: Vec<usize>, recv_lengths: Vec<usize>) -> Result<&A2ARequest, QueueError> {
        self.can_initiate()?;
        let iteration = self.next_iteration;
        self.next_iteration += 1;
        self.fifo.push_back(A2ARequest {
            iteration,
            tag: slot_for_iteration(iteration, self.slot_count) as Tag,
            send_lengths,
            recv_lengths,
            state: RequestState::Initiated,
        });
        Ok(self.fifo.back().expect("just pushed"))
    }

    pub fn tail(&self) -> Option<&A2ARequest> {
        self.fifo.front()
    }

    pub fn pop_completed(&mut self) -> Result<A2ARequest, QueueError> {
        let mut req = self.fifo.pop_front().ok_or(QueueError::Empty)?;
        req.state = RequestState::Completed;
        Ok(req)
    }
}

/// Per-tag count of arrived messages.
#[derive(Debug, Clone, Default)]
pub struct TagCounter {
    counts: BTreeMap<Tag, u64>,
}

impl TagCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tag: Tag) {
        *self.counts.entry(tag).or_insert(0) += 1;
    }

    pub fn count(&self, tag: Tag) -> u64 {
        self.counts.get(&tag).copied().unwrap_or(0)
    }

    /// Subtract `n` if at least `n` messages are present.
    pub fn try_consume(&mut self, tag: Tag, n: u64) -> bool {
        if n == 0 {
            return true;
        }
        match self.counts.get_mut(&tag) {
            Some(c) if *c >= n => {
                *c -= n;
                true
            }
            _ => false,
        }
    }
}

/// A slot held data from a different iteration than the one being completed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HazardError {
    pub source: RankId,
    pub slot: usize,
    pub expected: u64,
    pub observed: Option<u64>,
}

impl fmt::Display for HazardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.observed {
            Some(obs) => write!(
                f,
                "slot-reuse hazard: slot {} segment from rank {} holds iteration {obs}, expected {}",
                self.slot, self.source, self.expected
            ),
            None => write!(
                f,
                "slot-reuse hazard: slot {} segment from rank {} was never written, expected iteration {}",
                self.slot, self.source, self.expected
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for HazardError {}

/// Verify every source's stamp in `slot` equals `expected`.
///
/// When several sources are off, an overwrite from the future is reported
/// before a missing or stale write, since the former names the rank that
/// caused the race.
pub fn check_stamps(stamps: &[Option<u64>], slot: usize, expected: u64) -> Result<(), HazardError> {
    let mut first_bad = None;
    for (source, &stamp) in stamps.iter().enumerate() {
        if stamp == Some(expected) {
            continue;
        }
        let err = HazardError {
            source,
            slot,
            expected,
            observed: stamp,
        };
        if matches!(stamp, Some(s) if s > expected) {
            return Err(err);
        }
        first_bad.get_or_insert(err);
    }
    first_bad.map_or(Ok(()), Err)
}
