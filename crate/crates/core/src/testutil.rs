//! Shared helpers for unit tests: random tensors and a central-difference
//! oracle that never touches any backward kernel.

use crate::backprop::relative_error;
use crate::tensor::Tensor;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of a scalar function with respect to every entry of
/// `at`.
pub fn central_diff(at: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = at.clone();
    (0..at.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_EPS;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - FD_EPS;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
