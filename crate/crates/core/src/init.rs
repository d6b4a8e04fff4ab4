//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor5};

/// Generator used everywhere randomness is needed; portable across platforms.
pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fan-in scaled uniform draw on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn he_uniform<S: Scalar>(dims: Dims, fan_in: usize, rng: &mut SeededRng) -> Tensor5<S> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(dims, bound, rng)
}

pub fn uniform<S: Scalar>(dims: Dims, bound: f64, rng: &mut SeededRng) -> Tensor5<S> {
    Tensor5::from_fn(dims, |_, _, _, _, _| S::lit(rng.gen_range(-bound..=bound)))
}
