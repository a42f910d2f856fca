//! Data-parallel loop shims.
//!
//! All hot kernels route their outer loops through these helpers. With the
//! `parallel` feature the loops run on rayon and can be switched back to
//! sequential execution at runtime (used by the benchmark suite to compare
//! both modes in one process); without the feature only the sequential
//! code is compiled.
//!
//! Determinism contract: callers must compute each output element (or
//! chunk) as a pure function of its index, so scheduling order never
//! affects results. Reductions across elements are not allowed here.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable rayon at runtime. No-op without the `parallel` feature.
pub fn set_parallel(on: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL_ENABLED.store(on, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

/// True when work will actually be scheduled on rayon.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL_ENABLED.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive chunks of `data`.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collect `f(0..n)` preserving index order.
pub(crate) fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
