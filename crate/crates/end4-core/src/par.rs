//! Data-parallel helpers with a sequential fallback.
//!
//! Batch gradients, evaluation scoring, mask sweeps, and perturbation grids
//! are embarrassingly parallel over items. `par_map` fans out over rayon when
//! the `parallel` feature is enabled and degrades to a plain loop otherwise;
//! `seq_map` is always sequential and exists so benchmarks can compare the
//! two on identical workloads. Results come back in input order either way,
//! so reductions downstream stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference path for `par_map`.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over an index range, in parallel when enabled.
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_and_seq_agree_and_preserve_order() {
        let xs: Vec<u64> = (0..257).collect();
        let p = par_map(&xs, |x| x * x);
        let s = seq_map(&xs, |x| x * x);
        assert_eq!(p, s);
        assert_eq!(p[10], 100);
    }

    #[test]
    fn range_map_matches() {
        assert_eq!(par_map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }
}
