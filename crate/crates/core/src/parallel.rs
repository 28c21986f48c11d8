//! Data-parallel map with a sequential fallback.
//!
//! With the default `parallel` feature, independent jobs (sampling
//! trajectories, per-sample gradients, Gram-matrix rows) fan out over rayon;
//! without it everything runs on one thread. Results are always collected in
//! index order, so reductions downstream see a fixed summation order and
//! outputs are bit-identical across thread counts and between the two modes.

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Send + Sync) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Send + Sync) -> Vec<T> {
    seq_map_indexed(n, f)
}

/// Single-threaded reference path; the bench suite compares this against
/// `par_map_indexed` on the same workloads.
pub fn seq_map_indexed<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let f = |i: usize| (i * 31 + 7) % 101;
        assert_eq!(par_map_indexed(1000, f), seq_map_indexed(1000, f));
    }
}
