//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers fan work out over rayon;
//! without it they degrade to plain loops. A runtime override
//! ([`set_force_sequential`]) lets benches and tests compare both execution
//! modes within one binary.
//!
//! Every helper is written so the result is bitwise identical no matter how
//! the work is scheduled: outputs are written to disjoint slots, and floating
//! point reductions always happen in a fixed chunk order.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all helpers onto the sequential path at runtime.
pub fn set_force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when work may actually run on rayon.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Order-preserving map over `0..n`.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Apply `f` to equally sized mutable chunks of `data`. The final chunk may
/// be shorter. `f` receives the chunk index and the chunk slice.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Deterministic sum of `f(i)` over `0..n`.
///
/// Partial sums are accumulated sequentially inside fixed chunks and the
/// chunk partials are then added in chunk order, so the result does not
/// depend on thread count or scheduling.
pub fn chunked_sum<F>(n: usize, chunk_len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    assert!(chunk_len > 0);
    let n_chunks = n.div_ceil(chunk_len);
    let partials = map_indexed(n_chunks, |c| {
        let lo = c * chunk_len;
        let hi = (lo + chunk_len).min(n);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        acc
    });
    partials.into_iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + (i as f64).sqrt();
        let par = chunked_sum(10_000, 64, f);
        set_force_sequential(true);
        let seq = chunked_sum(10_000, 64, f);
        set_force_sequential(false);
        assert_eq!(par.to_bits(), seq.to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 3);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 3));
    }

    #[test]
    fn chunk_indices_cover_all() {
        let mut data = vec![0usize; 103];
        for_each_chunk_mut(&mut data, 10, |ci, chunk| {
            for (j, x) in chunk.iter_mut().enumerate() {
                *x = ci * 10 + j;
            }
        });
        assert!(data.iter().enumerate().all(|(i, &x)| x == i));
    }
}
