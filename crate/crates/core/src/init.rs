//! Weight initializers. All draws come from a caller-owned ChaCha stream so a
//! seed fully determines a model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

pub const TRUNC_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break F::lit(v);
        }
    })
}

pub fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..=bound)))
}
