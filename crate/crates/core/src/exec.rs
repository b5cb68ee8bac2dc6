//! Execution strategy for embarrassingly parallel driver loops (resampling
//! folds, tuning evaluations, benchmark cells).
//!
//! `Parallel` uses the rayon pool when the `parallel` feature is enabled and
//! silently degrades to sequential execution otherwise, so callers never
//! need to branch on the feature.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Evaluate `f(0..n)` preserving index order in the result.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Run `f` on a dedicated pool with `threads` workers. With the `parallel`
/// feature disabled, or `threads == 1`, the closure runs on the calling
/// thread with sequential execution semantics.
pub fn with_thread_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            return rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("failed to build worker pool")
                .install(f);
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
