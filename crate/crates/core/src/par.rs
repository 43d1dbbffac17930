//! Deterministic data-parallel helpers.
//!
//! Work over an image is split into fixed bands of [`ROWS_PER_CHUNK`] rows.
//! Each band produces a partial result; partials are always combined in band
//! order with pairwise summation, so the result is bit-identical whether the
//! bands ran on one thread, many threads, or without rayon at all
//! (`--no-default-features`).

use std::ops::Range;

/// Rows per work unit. Changing this changes round-off, not correctness.
pub const ROWS_PER_CHUNK: usize = 16;

/// Splits `0..rows` into fixed bands and maps each band, returning results in band order.
pub fn map_row_bands<T, F>(rows: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let bands = rows.div_ceil(ROWS_PER_CHUNK);
    let band = |i: usize| {
        let start = i * ROWS_PER_CHUNK;
        f(start..(start + ROWS_PER_CHUNK).min(rows))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..bands).into_par_iter().map(band).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..bands).map(band).collect()
    }
}

/// Maps every index of `0..n` independently, preserving order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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

/// Pairwise (cascade) summation; error grows with `log n` rather than `n`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise elementwise sum of equal-length vectors.
pub fn pairwise_sum_vecs(parts: &[Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let (a, b) = parts.split_at(n / 2);
            let mut left = pairwise_sum_vecs(a);
            let right = pairwise_sum_vecs(b);
            for (l, r) in left.iter_mut().zip(right) {
                *l += r;
            }
            left
        }
    }
}

/// Runs `f` inside a rayon pool with exactly `threads` workers. Without the
/// `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_cover_rows_in_order() {
        let bands = map_row_bands(37, |r| r);
        assert_eq!(bands.first().unwrap().start, 0);
        assert_eq!(bands.last().unwrap().end, 37);
        for w in bands.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn pairwise_matches_exact_integer_sum() {
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn thread_count_does_not_change_sums() {
        let data: Vec<f64> = (0..5000).map(|i| (f64::from(i) * 0.37).sin()).collect();
        let run = || {
            let parts = map_row_bands(500, |rows| {
                pairwise_sum(&data[rows.start * 10..rows.end * 10])
            });
            pairwise_sum(&parts)
        };
        let one = with_threads(1, run);
        let many = with_threads(8, run);
        assert_eq!(one.to_bits(), many.to_bits());
    }
}
