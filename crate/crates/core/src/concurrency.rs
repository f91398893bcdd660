//! Internal parallelism cap.
//!
//! `ENTROPRUNE_THREADS` limits the rayon pool used for row-parallel matmuls
//! and candidate probing. Work is partitioned so every reduction keeps its
//! fixed summation order; thread count changes speed, never results.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Effective thread cap. Reads `ENTROPRUNE_THREADS` once per process; when
/// set, the global rayon pool is sized to match.
pub fn threads() -> usize {
    *THREADS.get_or_init(|| {
        match std::env::var("ENTROPRUNE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            Some(n) => {
                let n = n.max(1);
                // Fails if a pool already exists; the cap still applies to the
                // threshold checks in this crate.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                n
            }
            None => rayon::current_num_threads(),
        }
    })
}
