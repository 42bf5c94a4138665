//! Deterministic fan-out over contiguous shards.

use rayon::prelude::*;

/// Splits `items` into at most `shards` contiguous chunks of equal size (the
/// last may be shorter) and maps them in parallel. Results keep chunk order, so
/// the outcome depends on `shards` but not on the number of threads.
pub fn map_shards<T, R, F>(items: &[T], shards: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    if items.is_empty() {
        return Vec::new();
    }
    let size = items.len().div_ceil(shards.max(1));
    items.par_chunks(size).map(f).collect()
}
