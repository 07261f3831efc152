//! Wire header for one-sided puts.
//!
//! Layout (big-endian, 27 bytes, followed by `length` payload bytes):
//!
//! | field     | bytes |
//! |-----------|-------|
//! | magic     | 4     |
//! | version   | 1     |
//! | tag       | 2     |
//! | slot      | 2     |
//! | source    | 2     |
//! | iteration | 8     |
//! | offset    | 4     |
//! | length    | 4     |

use core::fmt;

pub const FRAME_MAGIC: u32 = 0x424C_5321;
pub const FRAME_VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 27;

/// Slot value reserved for consumption acks.
pub const ACK_SLOT: u16 = 0xFFFF;
/// Tag value reserved for consumption acks.
pub const ACK_TAG: u16 = 0xFFFF;
/// Slot value reserved for control-plane frames (allgather, fence, goodbye).
pub const CONTROL_SLOT: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameHeader {
    pub tag: u16,
    pub slot: u16,
    pub source: u16,
    pub iteration: u64,
    pub offset: u32,
    pub length: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameError {
    Truncated { needed: usize, got: usize },
    BadMagic(u32),
    BadVersion(u8),
}

impl fmt::Display for FrameError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameError::Truncated { needed, got } => {
                write!(f, "truncated frame header: needed {needed} bytes, got {got}")
            }
            FrameError::BadMagic(m) => write!(f, "bad frame magic {m:#010x}"),
            FrameError::BadVersion(v) => write!(f, "unsupported frame version {v}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FrameError {}

impl FrameHeader {
    pub fn is_control(&self) -> bool {
        self.slot == CONTROL_SLOT
    }

    pub fn is_ack(&self) -> bool {
        self.slot == ACK_SLOT
    }

    pub fn encode(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut out = [0u8; FRAME_HEADER_LEN];
        out[0..4].copy_from_slice(&FRAME_MAGIC.to_be_bytes());
        out[4] = FRAME_VERSION;
        out[5..7].copy_from_slice(&self.tag.to_be_bytes());
        out[7..9].copy_from_slice(&self.slot.to_be_bytes());
        out[9..11].copy_from_slice(&self.source.to_be_bytes());
        out[11..19].copy_from_slice(&self.iteration.to_be_bytes());
        out[19..23].copy_from_slice(&self.offset.to_be_bytes());
        out[23..27].copy_from_slice(&self.length.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FrameError::Truncated {
                needed: FRAME_HEADER_LEN,
                got: bytes.len(),
            });
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let magic = u32_at(0);
        if magic != FRAME_MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        if bytes[4] != FRAME_VERSION {
            return Err(FrameError::BadVersion(bytes[4]));
        }
        let mut iter = [0u8; 8];
        iter.copy_from_slice(&bytes[11..19]);
        Ok(FrameHeader {
            tag: u16_at(5),
            slot: u16_at(7),
            source: u16_at(9),
            iteration: u64::from_be_bytes(iter),
            offset: u32_at(19),
            length: u32_at(23),
        })
    }
}
