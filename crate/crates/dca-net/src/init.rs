//! Weight initialisation.
//!
//! Weights draw from a fan-in-scaled uniform distribution,
//! U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero; normalisation
//! scales start at one. Draws happen in f64 and convert down, so f32 and f64
//! models built from the same seed agree to rounding.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Elem;

pub fn fan_in_uniform<T: Elem>(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product consistent")
}

pub fn zeros<T: Elem>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Elem>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}
