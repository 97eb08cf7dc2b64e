use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `upstream` where `cache_x > 0`. Either the pre- or post-activation
/// tensor works as the mask source.
pub fn relu_backward<T: Real>(cache_x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    cache_x.ensure_same_shape(upstream, "relu upstream")?;
    let data = cache_x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > T::zero() { u } else { T::zero() })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}
