//! Benchmark drivers shared by the CLI and the test suites.

pub mod a2a;
pub mod dlrm;
pub mod verify;

use std::thread;

use crate::transport::Communicator;

/// Run `f` once per rank on its own thread and collect results in rank order.
pub fn run_ranks<R: Send>(comms: Vec<Communicator>, f: impl Fn(Communicator) -> R + Sync) -> Vec<R> {
    thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| {
                let f = &f;
                thread::Builder::new()
                    .name(format!("rank-{}", c.rank()))
                    .spawn_scoped(s, move || f(c))
                    .expect("spawn rank worker")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}
