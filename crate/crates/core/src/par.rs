//! Index-parallel map with a sequential fallback.
//!
//! Work items are addressed by index and each builds its own rng stream from
//! that index, so the output is identical whether the `parallel` feature is on
//! and however many threads the pool has.

/// Apply `f` to `0..n` and collect results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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
        map_indexed_seq(n, f)
    }
}

/// Sequential reference path; always available.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// True when the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn parallel_matches_sequential() {
        let work = |i: usize| {
            let mut rng = SeededRng::new(9, i as u64);
            (0..100).map(|_| rng.uniform()).sum::<f64>()
        };
        assert_eq!(map_indexed(64, work), map_indexed_seq(64, work));
    }
}
