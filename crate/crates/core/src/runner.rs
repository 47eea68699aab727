//! Fan-out of independent seeded runs.
//!
//! Each run owns its engine, so seeds are embarrassingly parallel. Results
//! come back in seed order whichever path executes them.

/// Applies `f` to every seed, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn run_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    use rayon::prelude::*;
    seeds.par_iter().map(|s| f(*s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    run_seeds_sequential(seeds, f)
}

/// One seed after another on the calling thread.
pub fn run_seeds_sequential<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    seeds.iter().map(|s| f(*s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_seed_order() {
        let seeds: Vec<u64> = (0..64).rev().collect();
        let out = run_seeds(&seeds, |s| s * 2);
        assert_eq!(out, seeds.iter().map(|s| s * 2).collect::<Vec<_>>());
        assert_eq!(run_seeds_sequential(&seeds, |s| s * 2), out);
    }
}
