use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<T: Scalar, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Result<Tensor<T>> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::param(shape, data)
}

pub(crate) fn constant<T: Scalar>(shape: &[usize], v: f64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::of(v); n])
}
