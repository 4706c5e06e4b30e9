//! Data-parallel iteration helpers with a sequential fallback.
//!
//! Every hot loop in the crate goes through these wrappers. With the
//! `parallel` feature (default) they fan out over rayon; without it they run
//! as plain sequential loops. In both modes each closure invocation owns a
//! disjoint output slice and performs its inner reductions in a fixed order,
//! so results are bit-identical across thread counts and across the two
//! build modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when this build fans work out over rayon.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// Splits `data` into `chunk`-sized pieces and calls `f(chunk_index, piece)`
/// on each. Pieces are disjoint, so any write pattern is race-free.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Calls `f(i)` for every `i` in `0..n`.
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().for_each(f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        for i in 0..n {
            f(i);
        }
    }
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Caps the global rayon pool from the `SALG_THREADS` environment variable.
/// Call once at process start; later calls are no-ops. Does nothing in the
/// sequential build.
pub fn configure_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("SALG_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    // Ignore the error: the pool may already be initialized.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}
