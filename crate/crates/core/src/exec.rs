//! Data-parallel execution helpers.
//!
//! Every parallel loop in the crate goes through these functions so that the
//! sequential build (`--no-default-features`) shares one code path with the
//! rayon build. All of them preserve index order in their outputs; reductions
//! that feed accumulators are done sequentially by the caller. That is what
//! makes renders and loss logs bit-identical across worker counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` to a vector, in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map a slice to a vector, in index order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Run a closure inside a rayon pool with the given thread count.
///
/// `threads == 0` means "library default". The sequential build ignores the
/// request and runs the closure directly.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            f()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("failed to build thread pool")
                .install(f)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Whether this build actually runs data-parallel loops.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
