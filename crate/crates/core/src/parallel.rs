//! Deterministic data parallelism.
//!
//! A batch is split into fixed-size shards; each shard runs forward+backward
//! on its own tape, possibly on different threads. Results are reduced in
//! shard order, so the outcome depends only on the shard size, never on the
//! number of worker threads.

use rayon::prelude::*;

/// Map fixed-size chunks of `items` through `f` in parallel, returning the
/// outputs in chunk order.
pub fn map_shards<T: Sync, R: Send, F>(items: &[T], shard_size: usize, f: F) -> Vec<R>
where
    F: Fn(usize, &[T]) -> R + Sync,
{
    assert!(shard_size > 0);
    let shards: Vec<(usize, &[T])> = items.chunks(shard_size).enumerate().collect();
    shards
        .into_par_iter()
        .map(|(i, chunk)| f(i, chunk))
        .collect()
}
