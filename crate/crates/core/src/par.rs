//! Voxel-loop helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Reductions always split the index range at
//! fixed chunk boundaries and combine the partial results in chunk order, so
//! floating-point sums are bit-identical for any thread count.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work-unit size for voxel loops and reductions.
pub const CHUNK: usize = 4096;

fn chunk_range(c: usize, n: usize) -> Range<usize> {
    c * CHUNK..((c + 1) * CHUNK).min(n)
}

/// Writes `f(i)` into `out[i]` for every index.
pub fn fill<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if out.len() > CHUNK {
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, block)| {
            let base = c * CHUNK;
            for (k, slot) in block.iter_mut().enumerate() {
                *slot = f(base + k);
            }
        });
        return;
    }
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Collects `f(0..n)` in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > CHUNK {
        return (0..n).into_par_iter().with_min_len(CHUNK / 4).map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f` to every item of a slice (coarse-grained tasks such as
/// per-phase registrations). Output order follows input order.
pub fn map_items<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    #[cfg(not(feature = "parallel"))]
    return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
}

/// Deterministic chunked reduction over `0..n`.
pub fn reduce<A, M, C>(n: usize, identity: A, map: M, combine: C) -> A
where
    A: Send,
    M: Fn(Range<usize>) -> A + Sync + Send,
    C: Fn(A, A) -> A,
{
    let chunks = n.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    if chunks > 1 {
        let partials: Vec<A> = (0..chunks).into_par_iter().map(|c| map(chunk_range(c, n))).collect();
        return partials.into_iter().fold(identity, combine);
    }
    (0..chunks).map(|c| map(chunk_range(c, n))).fold(identity, combine)
}

/// Deterministic sum of `f(i)` over `0..n`.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    reduce(n, 0.0, |r| r.map(&f).sum::<f64>(), |a, b| a + b)
}

/// Maximum of `f(i)` over `0..n` (0 for an empty range).
pub fn max<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    reduce(n, 0.0, |r| r.map(&f).fold(0.0, f64::max), f64::max)
}

/// Runs `f` on a pool of `threads` workers (the global pool when `None`).
/// Without the `parallel` feature `f` runs on the calling thread.
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> crate::Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    if threads == Some(0) {
        return Err(crate::Error::Invalid("thread count must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::Error::Invalid(format!("cannot start {n} worker threads: {e}")))?;
        return Ok(pool.install(f));
    }
    Ok(f())
}
