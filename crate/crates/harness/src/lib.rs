//! Configuration, training, evaluation and experiment drivers behind the `mvp` binary.

pub mod ablate;
pub mod bench;
pub mod cli;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use config::{OptimConfig, RunConfig};

/// Caps the global worker pool at `MVP_THREADS` when that variable holds a positive integer.
pub fn init_threads() {
    if let Some(n) = std::env::var("MVP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // a pool that is already set up keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
