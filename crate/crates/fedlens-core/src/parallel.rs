//! Data-parallel execution of per-client and per-row work.
//!
//! With the default `parallel` feature the mapping helpers fan out over
//! rayon; without it they degrade to plain iteration. Both paths produce
//! bit-identical results: maps preserve input order and every floating-point
//! reduction folds fixed-size chunk partials in chunk order, so reports and
//! checkpoints do not depend on the feature flag or thread count.

/// Chunk length for deterministic float reductions.
pub const REDUCE_CHUNK: usize = 1024;

/// Order-preserving map over a slice, parallel when the feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Order-preserving map over a slice, parallel when the feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential map with the same shape as [`par_map`]; kept unconditionally
/// so benches can compare both execution paths in one build.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over fixed-size chunks of a slice (parallel when enabled), then fold
/// the per-chunk results in chunk order.
pub fn chunk_fold<T, P, F, G, A>(items: &[T], map: F, fold: G, init: A) -> A
where
    T: Sync,
    P: Send,
    F: Fn(&[T]) -> P + Sync + Send,
    G: FnMut(A, P) -> A,
{
    let chunks: Vec<&[T]> = items.chunks(REDUCE_CHUNK).collect();
    let partials = par_map(&chunks, |chunk: &&[T]| map(chunk));
    partials.into_iter().fold(init, fold)
}

/// Deterministic sum of a slice of doubles: per-chunk sequential sums folded
/// in chunk order. Identical output with or without `parallel`.
pub fn chunked_sum(values: &[f64]) -> f64 {
    chunk_fold(
        values,
        |chunk| chunk.iter().sum::<f64>(),
        |acc, p| acc + p,
        0.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<u64> = (0..5000).collect();
        let ys = par_map(&xs, |x| x * 2);
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(ys, seq_map(&xs, |x| x * 2));
    }

    #[test]
    fn chunked_sum_matches_manual_chunking() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let manual = xs
            .chunks(REDUCE_CHUNK)
            .map(|c| c.iter().sum::<f64>())
            .fold(0.0, |a, b| a + b);
        assert_eq!(chunked_sum(&xs), manual);
    }

    #[test]
    fn chunked_sum_empty() {
        assert_eq!(chunked_sum(&[]), 0.0);
    }
}
