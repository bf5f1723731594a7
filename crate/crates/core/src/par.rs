//! Worker-thread policy for the hot kernels.
//!
//! Parallel sections split work so every output element is written by
//! exactly one task with a fixed in-task accumulation order, and any
//! cross-task reduction happens serially in a fixed order. Results are
//! therefore bit-identical for any thread count; `set_threads(1)` simply
//! forces the serial path.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Set the worker thread count; 1 means fully single-threaded. Takes
/// effect for the rayon pool only if called before its first use.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
    if n > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn threads() -> usize {
    let n = THREADS.load(Ordering::Relaxed);
    if n != 0 {
        return n;
    }
    let detected = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8);
    THREADS.store(detected, Ordering::Relaxed);
    detected
}

/// True when parallel sections should run serially.
pub fn serial() -> bool {
    threads() <= 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_count_is_positive() {
        assert!(threads() >= 1);
    }
}
