//! Seed derivation and Gaussian draws.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a seed derived
//! from a master seed and a purpose path, so results do not depend on thread
//! scheduling or on the order in which independent jobs run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into a new independent seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<S: Scalar>(rng: &mut StreamRng) -> S {
    let v: f64 = rng.sample(StandardNormal);
    S::lit(v)
}

/// Standard normal tensor drawn from `rng` in row-major order.
pub fn gaussian_tensor<S: Scalar>(shape: &[usize], rng: &mut StreamRng) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gaussian(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
