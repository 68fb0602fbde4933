//! Fixtures shared by the benchmarks.

use wafl_core::data::gen_synthetic_mixture;
use wafl_core::math::derive_stream;
use wafl_core::{DiscreteDistribution, LabeledExample};

use rand::Rng;

/// Uniform cloud of `n` points in `[-1, 1]^dim`.
pub fn cloud(n: usize, dim: usize, seed: u64) -> DiscreteDistribution {
    let mut rng = derive_stream(seed, "bench:cloud");
    let points = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    DiscreteDistribution::uniform(points).expect("non-empty cloud")
}

pub fn examples(classes: usize, dim: usize, n: usize, seed: u64) -> Vec<LabeledExample> {
    gen_synthetic_mixture(classes, dim, n, 3.0, seed).expect("valid mixture")
}
