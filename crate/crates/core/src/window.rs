//! Geometry of the registered receive window.
//!
//! A window has `slot_count` slots. Each slot is split into `comm_size`
//! segments of `per_peer_bytes`, and segment `q` of a slot is written only
//! by rank `q`. A segment starts with a 4-byte big-endian length followed by
//! the payload, so receivers learn the actual size without a separate
//! metadata exchange.

use alloc::vec::Vec;
use core::fmt;

use crate::RankId;

/// Bytes taken by the length prefix at the head of each segment.
pub const SEGMENT_HEADER_LEN: usize = 4;

/// Slot (and tag) used by iteration `iteration`.
pub fn slot_for_iteration(iteration: u64, slot_count: usize) -> usize {
    debug_assert!(slot_count > 0);
    (iteration % slot_count as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentError {
    SlotOutOfRange { slot: usize, slot_count: usize },
    RangeOutOfBounds { offset: usize, length: usize, capacity: usize },
    PayloadTooLarge { payload: usize, capacity: usize },
    BadHeader { declared: usize, available: usize },
}

impl fmt::Display for SegmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentError::SlotOutOfRange { slot, slot_count } => {
                write!(f, "slot {slot} out of range (slot count {slot_count})")
            }
            SegmentError::RangeOutOfBounds { offset, length, capacity } => write!(
                f,
                "put range [{offset}, {}) exceeds slot capacity {capacity}",
                offset + length
            ),
            SegmentError::PayloadTooLarge { payload, capacity } => write!(
                f,
                "segment payload of {payload} bytes exceeds per-peer capacity {capacity} (incl. {SEGMENT_HEADER_LEN}-byte header)"
            ),
            SegmentError::BadHeader { declared, available } => write!(
                f,
                "segment declares {declared} payload bytes but only {available} are available"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SegmentError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowLayout {
    pub comm_size: usize,
    pub slot_count: usize,
    pub per_peer_bytes: usize,
}

impl WindowLayout {
    pub fn new(comm_size: usize, slot_count: usize, per_peer_bytes: usize) -> Self {
        WindowLayout {
            comm_size,
            slot_count,
            per_peer_bytes,
        }
    }

    pub fn slot_bytes(&self) -> usize {
        self.comm_size * self.per_peer_bytes
    }

    pub fn total_bytes(&self) -> usize {
        self.slot_count * self.slot_bytes()
    }

    pub fn segment_offset(&self, source: RankId) -> usize {
        source * self.per_peer_bytes
    }

    /// Largest payload that fits in one segment after the length prefix.
    pub fn max_payload(&self) -> usize {
        self.per_peer_bytes.saturating_sub(SEGMENT_HEADER_LEN)
    }

    pub fn check_put(&self, slot: usize, offset: usize, length: usize) -> Result<(), SegmentError> {
        if slot >= self.slot_count {
            return Err(SegmentError::SlotOutOfRange {
                slot,
                slot_count: self.slot_count,
            });
        }
        let capacity = self.slot_bytes();
        if length == 0 || offset.checked_add(length).map_or(true, |end| end > capacity) {
            return Err(SegmentError::RangeOutOfBounds {
                offset,
                length,
                capacity,
            });
        }
        Ok(())
    }

    /// Stable 64-bit digest of the registration arguments (FNV-1a), exchanged
    /// at registration so ranks with mismatched arguments are caught.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.comm_size as u64, self.slot_count as u64, self.per_peer_bytes as u64] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Prefix `payload` with its length. Fails if it does not fit `per_peer_bytes`.
pub fn encode_segment(payload: &[u8], per_peer_bytes: usize) -> Result<Vec<u8>, SegmentError> {
    if payload.len() + SEGMENT_HEADER_LEN > per_peer_bytes || payload.len() > u32::MAX as usize {
        return Err(SegmentError::PayloadTooLarge {
            payload: payload.len(),
            capacity: per_peer_bytes,
        });
    }
    let mut out = Vec::with_capacity(payload.len() + SEGMENT_HEADER_LEN);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Payload view of a length-prefixed segment.
pub fn decode_segment(segment: &[u8]) -> Result<&[u8], SegmentError> {
    if segment.len() < SEGMENT_HEADER_LEN {
        return Err(SegmentError::BadHeader {
            declared: SEGMENT_HEADER_LEN,
            available: segment.len(),
        });
    }
    let declared = u32::from_be_bytes([segment[0], segment[1], segment[2], segment[3]]) as usize;
    let available = segment.len() - SEGMENT_HEADER_LEN;
    if declared > available {
        return Err(SegmentError::BadHeader { declared, available });
    }
    Ok(&segment[SEGMENT_HEADER_LEN..SEGMENT_HEADER_LEN + declared])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn modulo_slotting() {
        assert_eq!(slot_for_iteration(5, 3), 2);
        assert_eq!(slot_for_iteration(0, 1), 0);
        assert_eq!(slot_for_iteration(7, 8), 7);
    }

    #[test]
    fn paper_window_shape() {
        let l = WindowLayout::new(8, 3, 4096);
        assert_eq!(l.slot_bytes(), 8 * 4096);
        assert_eq!(l.total_bytes(), 3 * 8 * 4096);
        assert_eq!(l.segment_offset(2), 8192);
    }

    #[test]
    fn put_bounds() {
        let l = WindowLayout::new(2, 2, 64);
        assert!(l.check_put(1, 64, 64).is_ok());
        assert!(matches!(l.check_put(2, 0, 1), Err(SegmentError::SlotOutOfRange { .. })));
        assert!(matches!(l.check_put(0, 100, 29), Err(SegmentError::RangeOutOfBounds { .. })));
        assert!(matches!(l.check_put(0, 0, 0), Err(SegmentError::RangeOutOfBounds { .. })));
    }

    #[test]
    fn digest_differs_on_mismatch() {
        assert_ne!(WindowLayout::new(8, 3, 4096).digest(), WindowLayout::new(8, 2, 4096).digest());
        assert_eq!(WindowLayout::new(8, 3, 4096).digest(), WindowLayout::new(8, 3, 4096).digest());
    }

    #[test]
    fn segment_overflow() {
        assert!(encode_segment(&[0; 60], 64).is_ok());
        assert!(encode_segment(&[0; 61], 64).is_err());
        assert!(decode_segment(&[0, 0, 0, 9, 1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn segment_roundtrip(payload in proptest::collection::vec(any::<u8>(), 0..200), slack in 0usize..16) {
            let cap = payload.len() + SEGMENT_HEADER_LEN + slack;
            let mut seg = encode_segment(&payload, cap).unwrap();
            // trailing garbage from an older, longer write must not leak in
            seg.resize(cap, 0xAB);
            prop_assert_eq!(decode_segment(&seg).unwrap(), &payload[..]);
        }
    }
}
