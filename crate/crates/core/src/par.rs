//! Data-parallel helpers.
//!
//! Every kernel in the crate funnels its outer loop through these helpers. Work
//! is split so that each output element is produced by exactly one closure
//! invocation running a fixed sequential order, which keeps results
//! bit-identical whether the `parallel` feature is enabled or not and
//! regardless of the rayon pool size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n` and collects results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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

/// Elementwise map of a slice into a fresh vector.
pub fn map_slice<F>(src: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Send + Sync,
{
    const GRAIN: usize = 4096;
    let mut out = vec![0.0; src.len()];
    for_each_chunk_mut(&mut out, GRAIN, |i, c| {
        let base = i * GRAIN;
        for (j, o) in c.iter_mut().enumerate() {
            *o = f(src[base + j]);
        }
    });
    out
}

/// Configures the global rayon pool. Returns the thread count in effect.
///
/// A no-op (always 1) when built without the `parallel` feature.
pub fn init_threads(threads: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        let n = threads.max(1);
        // Already initialised is fine; the first caller wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        1
    }
}
