//! Folding fixed-statistics batch norm into the preceding convolution.

use crate::error::{dim_err, input_err, Result};
use crate::tensor::{Real, Tensor};

/// Real-valued fused kernel `Ŵ = γ̂·W` and bias `b̂ = γ̂·b + β̂`, where
/// `γ̂ = γ/√(σ²+ε)` and `β̂ = β − μ·γ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Batch-norm parameters and the statistics to freeze them at.
#[derive(Debug, Clone, Copy)]
pub struct BnFold<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub mean: &'a [T],
    pub var: &'a [T],
}

pub fn fuse_conv_bn<T: Real>(
    conv_weight: &Tensor<T>,
    conv_bias: &Tensor<T>,
    bn: Option<BnFold<'_, T>>,
    eps: T,
) -> Result<FusedConv<T>> {
    let (o, _, _, _) = conv_weight.dims4()?;
    if conv_bias.shape() != [o] {
        return dim_err(format!("conv bias {:?} for {o} output channels", conv_bias.shape()));
    }
    let Some(bn) = bn else {
        return Ok(FusedConv { weight: conv_weight.clone(), bias: conv_bias.clone() });
    };
    if [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()].iter().any(|&l| l != o) {
        return dim_err(format!("batch-norm vectors do not all have {o} channels"));
    }
    if let Some(v) = bn.var.iter().find(|v| **v < T::zero()) {
        return input_err(format!("negative variance {v}"));
    }
    let gamma_hat: Vec<T> = bn.gamma.iter().zip(bn.var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let per_out = conv_weight.len() / o.max(1);
    let mut weight = conv_weight.clone();
    for (row, &gh) in weight.data_mut().chunks_mut(per_out).zip(&gamma_hat) {
        row.iter_mut().for_each(|w| *w *= gh);
    }
    let bias = (0..o)
        .map(|c| gamma_hat[c] * conv_bias.data()[c] + (bn.beta[c] - bn.mean[c] * gamma_hat[c]))
        .collect();
    Ok(FusedConv { weight, bias: Tensor::new(vec![o], bias)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::rand_tensor;
    use crate::nn::{batchnorm_forward, conv2d_forward, BnMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor::<f64>(&[2, 3, 3, 3], &mut rng);
        let b = rand_tensor::<f64>(&[2], &mut rng);
        let f = fuse_conv_bn(
            &w,
            &b,
            Some(BnFold { gamma: &[1.0; 2], beta: &[0.0; 2], mean: &[0.0; 2], var: &[1.0; 2] }),
            0.0,
        )
        .unwrap();
        assert_eq!(f.weight, w);
        assert_eq!(f.bias, b);
    }

    #[test]
    fn hand_values_and_unfused_composition() {
        // gamma_hat = 2 / sqrt(0.25) = 4, beta_hat = 1 - 0.5 * 4 = -1.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor::<f64>(&[1, 2, 3, 3], &mut rng);
        let b = Tensor::new(vec![1], vec![0.3]).unwrap();
        let fold = BnFold { gamma: &[2.0], beta: &[1.0], mean: &[0.5], var: &[0.25] };
        let f = fuse_conv_bn(&w, &b, Some(fold), 0.0).unwrap();
        assert!(f.weight.data().iter().zip(w.data()).all(|(fw, w)| (fw - 4.0 * w).abs() < 1e-15));
        assert!((f.bias.data()[0] - (4.0 * 0.3 - 1.0)).abs() < 1e-15);

        let x = rand_tensor::<f64>(&[2, 2, 5, 5], &mut rng);
        let z = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        let mode = BnMode::FixedStats { mean: fold.mean, var: fold.var };
        let gamma = Tensor::new(vec![1], vec![2.0]).unwrap();
        let beta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let (want, _) = batchnorm_forward(&z, &gamma, &beta, mode, 0.0).unwrap();
        let got = conv2d_forward(&x, &f.weight, &f.bias, 1, 1).unwrap();
        for (a, e) in got.data().iter().zip(want.data()) {
            assert!((a - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn negative_variance_rejected() {
        let w = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let fold = BnFold { gamma: &[1.0], beta: &[0.0], mean: &[0.0], var: &[-0.1] };
        assert!(matches!(fuse_conv_bn(&w, &b, Some(fold), 1e-5), Err(crate::Error::Input(_))));
    }
}
