//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run the same closures sequentially. Work is always split into
//! fixed-size chunks and partial results are combined in index order, so the
//! output is bit-identical regardless of the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f` on `0..n` and collects the results in order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Sums per-chunk partial vectors of length `len` in chunk order.
///
/// `f(start, end)` produces the partial sum for items `start..end`.
pub fn chunked_sum<F>(items: usize, chunk: usize, len: usize, f: F) -> Vec<f32>
where
    F: Fn(usize, usize) -> Vec<f32> + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = items.div_ceil(chunk);
    let partials = map_range(n_chunks, |c| f(c * chunk, ((c + 1) * chunk).min(items)));
    let mut out = vec![0.0f32; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Whether rayon is compiled in.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
