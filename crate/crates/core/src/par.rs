//! Deterministic data-parallel helpers. Results never depend on thread count:
//! work is split into fixed-size chunks and recombined in index order.

/// Maps `f` over `0..n`, collecting results in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
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

pub(crate) const CHUNK: usize = 4096;

/// Runs `f` on consecutive chunks of `items` of length `CHUNK`.
pub(crate) fn map_chunks<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&[I]) -> T + Sync + Send,
{
    let chunks = items.len().div_ceil(CHUNK);
    map_indexed(chunks, |c| {
        let end = ((c + 1) * CHUNK).min(items.len());
        f(&items[c * CHUNK..end])
    })
}
