//! Weight initialization helpers.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Normal(0, std) tensor. Draws happen at f64 so a given seed produces
/// the same weights regardless of the model's scalar type.
pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}
