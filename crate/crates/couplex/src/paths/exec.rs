//! Worker-count-independent parallel accumulation.
//!
//! Paths are processed in fixed blocks of [`BLOCK`] consecutive indices. Each
//! block partial is accumulated sequentially in index order; the partials are
//! then combined by a pairwise tree in block order. The summation tree's shape
//! depends only on the item count, never on how blocks were scheduled onto
//! threads, so estimators are bit-identical under 1, 2, or 8 workers.

use rayon::prelude::*;

/// Fixed accumulation block size: part of the reduction definition, not a
/// machine tuning knob (changing it changes floating-point rounding).
pub const BLOCK: u64 = 4096;

/// Combine `items` by a pairwise tree in index order: adjacent elements are
/// merged round by round until one remains. Returns `None` for empty input.
pub fn tree_reduce<T>(mut items: Vec<T>, combine: &impl Fn(T, T) -> T) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.drain(..);
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        drop(it);
        items = next;
    }
    items.pop()
}

/// Map fixed index blocks to partials (in parallel across `workers` threads)
/// and combine them by [`tree_reduce`]. The result is a pure function of
/// `(n_items, map, combine)`; `workers` affects wall clock only.
pub fn map_reduce_blocks<T, M, C>(n_items: u64, workers: usize, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<u64>) -> T + Sync,
    C: Fn(T, T) -> T,
{
    if n_items == 0 {
        return None;
    }
    let n_blocks = n_items.div_ceil(BLOCK);
    let block_range = |b: u64| {
        let lo = b * BLOCK;
        lo..(lo + BLOCK).min(n_items)
    };
    let partials: Vec<T> = if workers <= 1 {
        (0..n_blocks).map(|b| map(block_range(b))).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build worker pool");
        pool.install(|| {
            (0..n_blocks)
                .into_par_iter()
                .map(|b| map(block_range(b)))
                .collect()
        })
    };
    tree_reduce(partials, &combine)
}

/// Resolve the worker count: explicit flag, else the `COUPLEX_WORKERS`
/// environment variable, else 1.
pub fn resolve_workers(flag: Option<usize>) -> usize {
    if let Some(w) = flag {
        return w.max(1);
    }
    std::env::var("COUPLEX_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(1, |w| w.max(1))
}
