//! 2-d cross-correlation via im2col + GEMM.
//!
//! The column matrix for a whole batch has shape `(C·k·k, N·Ho·Wo)` so that a
//! single GEMM per pass covers every sample.

use std::ops::AddAssign;

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Resolved shape information for one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of one spatial axis, or `None` when the window does not tile
/// the padded input exactly.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize, usize),
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, in_channels, in_h, in_w) = input;
        if stride < 1 {
            return dim_err("stride must be at least 1");
        }
        let (Some(out_h), Some(out_w)) = (
            conv_out_extent(in_h, kernel, stride, padding),
            conv_out_extent(in_w, kernel, stride, padding),
        ) else {
            return dim_err(format!(
                "kernel {kernel} with stride {stride} and padding {padding} does not tile a {in_h}x{in_w} input"
            ));
        };
        Ok(Self { batch, in_channels, in_h, in_w, out_channels, kernel, stride, padding, out_h, out_w })
    }

    /// Geometry for an NCHW input and an `O×C×k×k` weight.
    pub fn from_tensors<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let dims = x.dims4()?;
        let (o, c, kh, kw) = weight.dims4()?;
        if c != dims.1 {
            return dim_err(format!("weight expects {c} input channels, input has {}", dims.1));
        }
        if kh != kw {
            return dim_err(format!("only square kernels are supported, got {kh}x{kw}"));
        }
        Self::new(dims, o, kh, stride, padding)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn columns(&self) -> usize {
        self.batch * self.out_plane()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output columns `lo..hi` whose tap at kernel column `kx` lands inside
    /// the unpadded input.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.in_w + self.padding > kx {
            ((self.in_w + self.padding - kx - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Multiply-accumulates of the forward convolution.
    pub fn macs(&self) -> u64 {
        (self.columns() * self.patch_len() * self.out_channels) as u64
    }
}

/// Unfolds an NCHW buffer into the `(C·k·k, N·Ho·Wo)` column matrix.
/// Out-of-bounds taps take `pad_value`.
pub fn im2col<E: Copy>(x: &[E], g: &ConvGeometry, pad_value: E) -> Vec<E> {
    let cols = g.columns();
    let plane = g.out_plane();
    let mut out = vec![pad_value; g.patch_len() * cols];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_columns(kx);
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        let dst = &mut dst_row[n * plane + oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let start = lo + kx - g.padding;
                            dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds a column matrix back into NCHW, summing overlapping taps and
/// dropping those that fall into the padding.
pub fn col2im<E: Copy + Default + AddAssign>(cols_buf: &[E], g: &ConvGeometry) -> Vec<E> {
    let cols = g.columns();
    let plane = g.out_plane();
    let mut x = vec![E::default(); g.batch * g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols_buf[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_columns(kx);
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = &src_row[n * plane + oy * g.out_w..][..g.out_w];
                        let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        if g.stride == 1 {
                            let start = lo + kx - g.padding;
                            for (d, &v) in dst_row[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                dst_row[ox * g.stride + kx - g.padding] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(O, N·P)` channel-major matrix → NCHW.
pub(crate) fn channel_major_to_nchw<E: Copy + Default>(m: &[E], batch: usize, channels: usize, plane: usize) -> Vec<E> {
    let mut out = vec![E::default(); batch * channels * plane];
    for c in 0..channels {
        for n in 0..batch {
            out[(n * channels + c) * plane..][..plane].copy_from_slice(&m[c * batch * plane + n * plane..][..plane]);
        }
    }
    out
}

/// NCHW → `(C, N·P)` channel-major matrix.
pub(crate) fn nchw_to_channel_major<E: Copy + Default>(x: &[E], batch: usize, channels: usize, plane: usize) -> Vec<E> {
    let mut out = vec![E::default(); batch * channels * plane];
    for n in 0..batch {
        for c in 0..channels {
            out[c * batch * plane + n * plane..][..plane].copy_from_slice(&x[(n * channels + c) * plane..][..plane]);
        }
    }
    out
}

fn check_bias<T: Real>(bias: &Tensor<T>, out_channels: usize) -> Result<()> {
    if bias.shape() != [out_channels] {
        return dim_err(format!("bias shape {:?}, expected [{out_channels}]", bias.shape()));
    }
    Ok(())
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_tensors(x, weight, stride, padding)?;
    check_bias(bias, g.out_channels)?;
    let cols = im2col(x.data(), &g, T::zero());
    let n_cols = g.columns();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.out_channels * n_cols];
    T::gemm(g.out_channels, k, n_cols, weight.data(), (k as isize, 1), &cols, (n_cols as isize, 1), &mut out, false);
    for (row, &b) in out.chunks_mut(n_cols).zip(bias.data()) {
        row.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(
        g.output_shape().to_vec(),
        channel_major_to_nchw(&out, g.batch, g.out_channels, g.out_plane()),
    )
}

fn check_upstream<T: Real>(g: &ConvGeometry, upstream: &Tensor<T>) -> Result<()> {
    if upstream.shape() != g.output_shape() {
        return dim_err(format!(
            "upstream gradient shape {:?} does not match conv output {:?}",
            upstream.shape(),
            g.output_shape()
        ));
    }
    Ok(())
}

/// Gradient with respect to the convolution input only.
pub fn conv2d_backward_input<T: Real>(
    input_shape: &[usize],
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return dim_err(format!("expected NCHW input shape, got {input_shape:?}"));
    };
    let (o, wc, kh, _) = weight.dims4()?;
    if wc != c {
        return dim_err(format!("weight expects {wc} input channels, input has {c}"));
    }
    let g = ConvGeometry::new((n, c, h, w), o, kh, stride, padding)?;
    check_upstream(&g, upstream)?;
    let gmat = nchw_to_channel_major(upstream.data(), g.batch, g.out_channels, g.out_plane());
    let k = g.patch_len();
    let n_cols = g.columns();
    let mut dcols = vec![T::zero(); k * n_cols];
    T::gemm(k, o, n_cols, weight.data(), (1, k as isize), &gmat, (n_cols as isize, 1), &mut dcols, false);
    Tensor::new(g.input_shape().to_vec(), col2im(&dcols, &g))
}

/// Gradients with respect to the weight and bias.
pub fn conv2d_backward_params<T: Real>(
    cache_x: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::from_tensors(cache_x, weight, stride, padding)?;
    check_upstream(&g, upstream)?;
    let gmat = nchw_to_channel_major(upstream.data(), g.batch, g.out_channels, g.out_plane());
    let cols = im2col(cache_x.data(), &g, T::zero());
    let k = g.patch_len();
    let n_cols = g.columns();
    let mut gw = vec![T::zero(); g.out_channels * k];
    T::gemm(g.out_channels, n_cols, k, &gmat, (n_cols as isize, 1), &cols, (1, n_cols as isize), &mut gw, false);
    let gb: Vec<T> = gmat.chunks(n_cols).map(|row| row.iter().copied().sum()).collect();
    Ok((Tensor::new(weight.shape().to_vec(), gw)?, Tensor::new(vec![g.out_channels], gb)?))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward<T: Real>(
    cache_x: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gw, gb) = conv2d_backward_params(cache_x, weight, upstream, stride, padding)?;
    let gx = conv2d_backward_input(cache_x.shape(), weight, upstream, stride, padding)?;
    Ok((gx, gw, gb))
}
