//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) inner loops fan out over a
//! rayon pool; without it the same closures run sequentially. Every reduction
//! stays inside one closure invocation with a fixed order, so results are
//! bit-identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each chunk of `chunk` elements, with its chunk index.
pub fn for_each_chunk<T: Send, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
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

/// Map over indices `0..n`, collecting results in index order.
pub fn map_indices<T: Send, F>(n: usize, f: F) -> Vec<T>
where
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

/// Configure the global pool size. `0` keeps the default (all cores).
/// A no-op without the `parallel` feature.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            // Ignore the error if a pool already exists (e.g. in tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
