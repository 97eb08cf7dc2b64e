//! Finite-difference helpers shared by the unit tests.

use rand::Rng;

use crate::tensor::{Real, Tensor};

pub fn rand_tensor<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Central differences of a scalar function with respect to every element of `at`.
pub fn central_difference(at: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = at.clone();
    let mut out = Tensor::zeros(at.shape());
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a − e| / max(|a|, |e|, 1e-2)`.
pub fn rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, e)| (a - e).abs() / a.abs().max(e.abs()).max(1e-2))
        .fold(0.0, f64::max)
}
