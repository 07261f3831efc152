//! Pure building blocks for a bounded-lag synchronous (BLS) alltoallv.
//!
//! Nothing here touches threads, sockets or files. The companion `bls`
//! crate wires these pieces to a transport and drives them from a CLI.
//!
//! - [`frame`]: the 27-byte put header shared by every backend.
//! - [`window`]: slot geometry and the in-segment length header.
//! - [`request`]: outstanding-request FIFO, tag counters and the
//!   slot-reuse hazard check.
//! - [`config`]: collective configuration and the memory-overhead formula.
//! - [`model`]: deterministic f32 DLRM inference numerics.
//! - [`workload`]: seeded batch and delay generators, CSV row parsing.
//! - [`metrics`]: latency/throughput aggregation and lag checking.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod config;
pub mod frame;
pub mod metrics;
pub mod model;
pub mod request;
pub mod window;
pub mod workload;

pub use config::{compute_bls_overhead, BlsConfig, ConfigError, SafetyMode};
pub use frame::{FrameError, FrameHeader, FRAME_HEADER_LEN, FRAME_MAGIC, FRAME_VERSION};
pub use request::{A2ARequest, HazardError, RequestQueue, TagCounter};
pub use window::{slot_for_iteration, SegmentError, WindowLayout};

/// Index of a rank in a communicator, dense in `[0, comm_size)`.
pub type RankId = usize;

/// Tag carried by every message; at most `u16::MAX` values on the wire.
pub type Tag = u16;
