//! Per-channel batch normalization over NCHW tensors.

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Stability constant added to the variance in every batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;

/// Where the normalization statistics come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BnMode<'a, T> {
    /// Mean and biased variance over batch and spatial axes.
    BatchStats,
    /// Externally supplied per-channel mean and variance.
    FixedStats { mean: &'a [T], var: &'a [T] },
}

/// State kept from the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub gamma: Vec<T>,
    pub batch_stats: bool,
}

fn channel_view<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(format!(
            "batch norm over {c} channels got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok((n, c, h * w))
}

/// Per-channel mean and biased variance over batch and spatial axes,
/// accumulated in `f64`.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            sum += x.data()[(b * c + ch) * plane..][..plane].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += x.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::lit(mu);
        var[ch] = T::lit(sq / count);
    }
    Ok((mean, var))
}

/// Returns the normalized output together with the cache; the statistics that
/// were used are in `cache.mean` / `cache.var`.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode<'_, T>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, plane) = channel_view(x, gamma, beta)?;
    let (mean, var, batch_stats) = match mode {
        BnMode::BatchStats => {
            if n * plane == 0 {
                return dim_err("batch statistics need at least one element per channel");
            }
            let (m, v) = channel_stats(x)?;
            (m, v, true)
        }
        BnMode::FixedStats { mean, var } => {
            if mean.len() != c || var.len() != c {
                return dim_err(format!("fixed statistics for {} channels, input has {c}", mean.len()));
            }
            (mean.to_vec(), var.to_vec(), false)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let src = &x.data()[off..off + plane];
            let xh = &mut x_hat.data_mut()[off..off + plane];
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - mu) * is;
            }
            let dst = &mut y.data_mut()[off..off + plane];
            for (d, &h) in dst.iter_mut().zip(x_hat.data()[off..off + plane].iter()) {
                *d = g * h + be;
            }
        }
    }
    let cache = BnCache { x_hat, inv_std, mean, var, gamma: gamma.data().to_vec(), batch_stats };
    Ok((y, cache))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`. In batch-statistics mode the
/// dependence of mean and variance on the input is included.
pub fn batchnorm_backward<T: Real>(cache: &BnCache<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.x_hat.ensure_same_shape(upstream, "batch norm upstream")?;
    let (n, c, h, w) = upstream.dims4()?;
    let plane = h * w;
    let m = T::lit((n * plane) as f64);
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let up = &upstream.data()[off..off + plane];
            let xh = &cache.x_hat.data()[off..off + plane];
            for (&u, &x) in up.iter().zip(xh) {
                g_beta[ch] += u;
                g_gamma[ch] += u * x;
            }
        }
    }
    let mut gx = Tensor::zeros(upstream.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = cache.gamma[ch] * cache.inv_std[ch];
            let up = &upstream.data()[off..off + plane];
            let xh = &cache.x_hat.data()[off..off + plane];
            let dst = &mut gx.data_mut()[off..off + plane];
            if cache.batch_stats {
                let (sb, sg) = (g_beta[ch], g_gamma[ch]);
                for ((d, &u), &x) in dst.iter_mut().zip(up).zip(xh) {
                    *d = scale * (u - sb / m - x * sg / m);
                }
            } else {
                for (d, &u) in dst.iter_mut().zip(up) {
                    *d = scale * u;
                }
            }
        }
    }
    Ok((gx, Tensor::new(vec![c], g_gamma)?, Tensor::new(vec![c], g_beta)?))
}
