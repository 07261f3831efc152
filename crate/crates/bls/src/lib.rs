//! Bounded-lag synchronous alltoallv over a one-sided put transport.

pub mod bench;
pub mod collective;
pub mod dlrm;
pub mod plot;
pub mod report;
pub mod transport;
pub mod workload;

pub use bls_core as core;
