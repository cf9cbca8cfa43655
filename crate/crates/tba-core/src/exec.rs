//! Execution-mode plumbing: sequential or rayon-backed data parallelism.
//!
//! Every parallel entry point in the crate funnels through [`map_indexed`],
//! which preserves input order so results are bit-identical in both modes.
//! The thread count honours the `TBA_THREADS` environment variable when the
//! `parallel` feature is active; without the feature the parallel mode falls
//! back to sequential execution.

use std::sync::OnceLock;

/// How batch work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// One item after another on the calling thread.
    Sequential,
    /// Items distributed over a rayon pool (sequential when the `parallel`
    /// feature is compiled out).
    #[default]
    Parallel,
}

impl ExecMode {
    /// True when this mode will actually fan work out over threads.
    pub fn is_parallel(self) -> bool {
        match self {
            ExecMode::Sequential => false,
            ExecMode::Parallel => cfg!(feature = "parallel"),
        }
    }
}

/// Thread count requested via `TBA_THREADS`, if set to a positive integer.
pub fn configured_threads() -> Option<usize> {
    static THREADS: OnceLock<Option<usize>> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("TBA_THREADS")
            .ok()
            .and_then(|raw| raw.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    })
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = configured_threads() {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build thread pool")
    })
}

/// Applies `f` to `0..n` and collects results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode.is_parallel() {
            use rayon::prelude::*;
            return pool().install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = mode;
    (0..n).map(f).collect()
}
