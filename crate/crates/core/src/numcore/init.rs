//! Weight initialization.
//!
//! He-uniform for layers feeding a ReLU, Xavier-uniform for attention and
//! plain linear projections. Samples are drawn in `f64` and cast, so the
//! same seed yields the same weights at either precision.

use rand::Rng;

use super::tensor::{Real, Tensor};

/// He (Kaiming) uniform: `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`.
pub fn he_uniform<F: Real, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    uniform(shape, limit, rng)
}

/// Xavier (Glorot) uniform: `U(-sqrt(6/(fan_in+fan_out)), ...)`.
pub fn xavier_uniform<F: Real, R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, limit, rng)
}

fn uniform<F: Real, R: Rng>(shape: Vec<usize>, limit: f64, rng: &mut R) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}
