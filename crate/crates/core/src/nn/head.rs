//! Output block (global average pooling followed by a fully connected layer)
//! and the softmax cross-entropy criterion.

use crate::error::{dim_err, input_err, Result};
use crate::tensor::{Real, Tensor};

/// Spatial mean per channel: `N×C×H×W → N×C`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    if plane == 0 {
        return dim_err("global pooling over an empty plane");
    }
    let inv = T::one() / T::lit(plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![n, c], data)
}

fn check_fc<T: Real>(channels: usize, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<usize> {
    let (k, f) = weight.dims2()?;
    if f != channels {
        return dim_err(format!("fc expects {f} features, pooled input has {channels}"));
    }
    if bias.shape() != [k] {
        return dim_err(format!("fc bias shape {:?}, expected [{k}]", bias.shape()));
    }
    Ok(k)
}

/// `logits = pooled · Wᵀ + b` with `W: K×C`.
pub fn output_block_forward<T: Real>(x: &Tensor<T>, fc_weight: &Tensor<T>, fc_bias: &Tensor<T>) -> Result<Tensor<T>> {
    let pooled = global_avg_pool(x)?;
    let (n, c) = pooled.dims2()?;
    let k = check_fc(c, fc_weight, fc_bias)?;
    let mut logits = vec![T::zero(); n * k];
    T::gemm(n, c, k, pooled.data(), (c as isize, 1), fc_weight.data(), (1, c as isize), &mut logits, false);
    for row in logits.chunks_mut(k) {
        row.iter_mut().zip(fc_bias.data()).for_each(|(v, &b)| *v += b);
    }
    Tensor::new(vec![n, k], logits)
}

/// Gradient with respect to the block input only.
pub fn output_block_backward_input<T: Real>(
    input_shape: &[usize],
    fc_weight: &Tensor<T>,
    grad_logits: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return dim_err(format!("expected NCHW input shape, got {input_shape:?}"));
    };
    let (k, f) = fc_weight.dims2()?;
    if f != c || grad_logits.shape() != [n, k] {
        return dim_err(format!(
            "output block backward: input {input_shape:?}, weight {:?}, upstream {:?}",
            fc_weight.shape(),
            grad_logits.shape()
        ));
    }
    let mut g_pooled = vec![T::zero(); n * c];
    T::gemm(n, k, c, grad_logits.data(), (k as isize, 1), fc_weight.data(), (c as isize, 1), &mut g_pooled, false);
    let plane = h * w;
    let inv = T::one() / T::lit(plane as f64);
    let mut gx = Vec::with_capacity(n * c * plane);
    for &g in &g_pooled {
        gx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Gradients with respect to the fc weight and bias.
pub fn output_block_backward_params<T: Real>(
    cache_x: &Tensor<T>,
    fc_weight: &Tensor<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let pooled = global_avg_pool(cache_x)?;
    let (n, c) = pooled.dims2()?;
    let (k, f) = fc_weight.dims2()?;
    if f != c || grad_logits.shape() != [n, k] {
        return dim_err(format!(
            "output block backward: pooled {:?}, weight {:?}, upstream {:?}",
            pooled.shape(),
            fc_weight.shape(),
            grad_logits.shape()
        ));
    }
    let mut gw = vec![T::zero(); k * c];
    T::gemm(k, n, c, grad_logits.data(), (1, k as isize), pooled.data(), (c as isize, 1), &mut gw, false);
    let mut gb = vec![T::zero(); k];
    for row in grad_logits.data().chunks(k) {
        gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
    }
    Ok((Tensor::new(vec![k, c], gw)?, Tensor::new(vec![k], gb)?))
}

/// Returns `(grad_input, grad_fc_weight, grad_fc_bias)`.
pub fn output_block_backward<T: Real>(
    cache_x: &Tensor<T>,
    fc_weight: &Tensor<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gw, gb) = output_block_backward_params(cache_x, fc_weight, grad_logits)?;
    let gx = output_block_backward_input(cache_x.shape(), fc_weight, grad_logits)?;
    Ok((gx, gw, gb))
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, and its
/// gradient `(softmax − onehot) / B`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return dim_err(format!("{} labels for a batch of {b}", labels.len()));
    }
    if b == 0 {
        return input_err("cross-entropy over an empty batch");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return input_err(format!("label {bad} out of range for {k} classes"));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label].to_f64_lossy() - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::lit((e / sum - onehot) * inv_b));
        }
    }
    Ok((T::lit(loss * inv_b), Tensor::new(vec![b, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{central_difference, rand_tensor, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_identity_fc() {
        let x = Tensor::full(&[2, 3, 4, 4], 1.75f32);
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let logits = output_block_forward(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn two_class_hand_example() {
        // Two channels with spatial means 1 and 2.
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.5f64, 1.5, 2.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let logits = output_block_forward(&x, &w, &b).unwrap();
        assert_eq!(logits.data(), &[1.0, 7.0]);
    }

    #[test]
    fn feature_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        assert!(output_block_forward(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])).is_err());
        assert!(output_block_forward(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn output_block_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor::<f64>(&[2, 3, 2, 2], &mut rng);
        let w = rand_tensor::<f64>(&[4, 3], &mut rng);
        let b = rand_tensor::<f64>(&[4], &mut rng);
        let r = rand_tensor::<f64>(&[2, 4], &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = output_block_forward(x, w, b).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (gx, gw, gb) = output_block_backward(&x, &w, &r).unwrap();
        assert!(rel_err(&gx, &central_difference(&x, 1e-3, |t| loss(t, &w, &b))) < 1e-4);
        assert!(rel_err(&gw, &central_difference(&w, 1e-3, |t| loss(&x, t, &b))) < 1e-4);
        assert!(rel_err(&gb, &central_difference(&b, 1e-3, |t| loss(&x, &w, t))) < 1e-4);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::full(&[3, 4], 0.3f64);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let logits = Tensor::new(vec![1, 3], vec![0.0f64, 20.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn cross_entropy_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = rand_tensor::<f64>(&[3, 5], &mut rng);
        let labels = [4, 0, 2];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let numeric = central_difference(&logits, 1e-3, |t| softmax_cross_entropy(t, &labels).unwrap().0);
        assert!(rel_err(&g, &numeric) < 1e-4);
    }
}
