//! Seeded inputs shared by the benchmarks.

use lambda_core::autodiff::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n × d` matrix of standard normal entries.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng))
}
