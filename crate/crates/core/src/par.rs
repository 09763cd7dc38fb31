//! Deterministic data-parallel helpers.
//!
//! Reductions are split into fixed-size chunks whose partial sums are added
//! in index order, so results do not depend on the rayon thread count.

use rayon::prelude::*;
use std::ops::Range;

pub(crate) const CHUNK: usize = 8192;

pub(crate) fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(Range<usize>) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect();
    partial.iter().sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    det_sum(a.len(), |r| a[r.clone()].iter().zip(&b[r]).map(|(x, y)| x * y).sum())
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
