use rand::Rng;

use crate::tensor::Tensor;
use crate::Scalar;

/// Kaiming-uniform fan-in initialisation with negative slope `√5`, i.e.
/// `U(-b, b)` with `b = sqrt(6 / ((1 + 5) · fan_in)) = 1 / sqrt(fan_in)`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (6.0 * fan_in.max(1) as f64)).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}
