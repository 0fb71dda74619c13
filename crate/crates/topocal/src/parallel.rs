//! Data-parallel helpers with a sequential fallback.
//!
//! Everything in this crate that fans out over rows, patches, dictionary
//! entries or dataset entries goes through these functions. With the
//! `parallel` feature (default) the work is distributed with rayon; without
//! it the same closures run sequentially. Results are collected in index
//! order in both modes, so output is bit-identical regardless of feature
//! flags or thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_indexed`], always available. The benchmark
/// suite uses it to compare the two execution modes in a single build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
