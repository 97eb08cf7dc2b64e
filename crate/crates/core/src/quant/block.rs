//! Executable frozen blocks: the 8-bit fused conv(-bn)-relu block and the
//! full-precision fallback used when quantization is disabled.

use crate::error::{dim_err, state_err, Result};
use crate::nn::conv::{channel_major_to_nchw, col2im, im2col, nchw_to_channel_major, ConvGeometry};
use crate::nn::{
    batchnorm_forward, conv2d_backward_input, conv2d_forward, output_block_backward_input, output_block_forward,
    relu, relu_backward, BlockParams, BlockSpec, BnMode, ConvParams, ConvSpec, FrozenBlock, BN_EPS,
};
use crate::quant::fusion::FusedConv;
use crate::quant::quantize::{dequantize, quantize_affine, QuantParams, QuantTensor};
use crate::tensor::{Real, Tensor};

/// Largest magnitude of an 8-bit weight code times a centered activation or
/// gradient code.
const MAX_CODE_PRODUCT: f64 = 127.0 * 255.0;

/// Whether integer sums of `terms` code products stay exactly representable
/// in f32 (below 2^24). Integer arithmetic carried out in such a float type is
/// exact in any evaluation order, so it equals 32-bit accumulation.
fn fits_f32(terms: usize) -> bool {
    (terms as f64) * MAX_CODE_PRODUCT < (1u32 << f32::MANTISSA_DIGITS) as f64
}

fn widen<T: Real>(codes: impl Iterator<Item = i32>) -> Vec<T> {
    codes.map(|c| T::lit(c as f64)).collect()
}

/// A frozen conv-bn-relu block with batch norm folded into the kernel and all
/// operands stored as 8-bit integers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedConvBlock {
    pub spec: ConvSpec,
    /// Real-valued fused parameters the integer ones were derived from.
    pub fused: FusedConv<f32>,
    /// `out × in × k × k`, symmetric.
    pub weight_q: Vec<i8>,
    pub weight_qp: QuantParams,
    /// Bias in accumulator units (`scale = input.scale · weight.scale`).
    pub bias_q: Vec<i32>,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    /// Scale of the ReLU-masked upstream gradient; only blocks after the first
    /// trained block have one.
    pub grad_qp: Option<QuantParams>,
}

impl QuantizedConvBlock {
    pub fn new(
        spec: ConvSpec,
        fused: FusedConv<f32>,
        input_qp: QuantParams,
        output_qp: QuantParams,
        grad_qp: Option<QuantParams>,
    ) -> Result<Self> {
        let shape = [spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size];
        if fused.weight.shape() != shape || fused.bias.shape() != [spec.out_channels] {
            return dim_err(format!("fused parameters {:?} do not match block spec", fused.weight.shape()));
        }
        let weight_qp = QuantParams::symmetric(fused.weight.max_abs());
        let weight_q = fused.weight.data().iter().map(|&w| weight_qp.code(w) as i8).collect();
        let acc_scale = input_qp.scale as f64 * weight_qp.scale as f64;
        let bias_q = fused
            .bias
            .data()
            .iter()
            .map(|&b| (b as f64 / acc_scale).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect();
        Ok(Self { spec, fused, weight_q, weight_qp, bias_q, input_qp, output_qp, grad_qp })
    }

    fn geometry(&self, shape: &[usize]) -> Result<ConvGeometry> {
        let [n, c, h, w] = shape[..] else {
            return dim_err(format!("expected NCHW input, got {shape:?}"));
        };
        if c != self.spec.in_channels {
            return dim_err(format!("block expects {} channels, input has {c}", self.spec.in_channels));
        }
        ConvGeometry::new((n, c, h, w), self.spec.out_channels, self.spec.kernel_size, self.spec.stride, self.spec.padding)
    }

    /// Integer fused convolution with 32-bit accumulation, requantized to the
    /// calibrated output scale; ReLU clamps at the output zero point.
    pub fn forward_q(&self, x_q: &QuantTensor) -> Result<QuantTensor> {
        if x_q.params != self.input_qp {
            return state_err("input was not quantized with this block's calibrated input parameters");
        }
        let g = self.geometry(&x_q.shape)?;
        let acc = if fits_f32(g.patch_len()) { self.accumulate::<f32>(x_q, &g) } else { self.accumulate::<f64>(x_q, &g) };

        let multiplier = self.input_qp.scale as f64 * self.weight_qp.scale as f64 / self.output_qp.scale as f64;
        let zp = self.output_qp.zero_point;
        let floor = if self.spec.has_relu { zp.max(self.output_qp.qmin()) } else { self.output_qp.qmin() };
        let ceil = self.output_qp.qmax();
        let mut codes = acc;
        for (row, &b) in codes.chunks_mut(g.columns()).zip(&self.bias_q) {
            for v in row.iter_mut() {
                let real = (*v as i64 + b as i64) as f64 * multiplier;
                *v = (real.round_ties_even() as i64 + zp as i64).clamp(floor as i64, ceil as i64) as i32;
            }
        }
        let codes = channel_major_to_nchw(&codes, g.batch, g.out_channels, g.out_plane());
        QuantTensor::from_codes(g.output_shape().to_vec(), &codes, self.output_qp)
    }

    /// `W_q · im2col(x_q − zp)` as a channel-major `(O, N·Ho·Wo)` matrix.
    fn accumulate<T: Real>(&self, x_q: &QuantTensor, g: &ConvGeometry) -> Vec<i32> {
        let centered: Vec<T> = widen(x_q.centered().into_iter());
        let cols = im2col(&centered, g, T::zero());
        let w: Vec<T> = widen(self.weight_q.iter().map(|&v| v as i32));
        let k = g.patch_len();
        let mut acc = vec![T::zero(); g.out_channels * g.columns()];
        T::gemm(g.out_channels, k, g.columns(), &w, (k as isize, 1), &cols, (g.columns() as isize, 1), &mut acc, false);
        acc.into_iter().map(|v| v.to_f64_lossy() as i32).collect()
    }

    /// `col2im(W_qᵀ · g_q)`: integer input gradient in NCHW.
    fn propagate<T: Real>(&self, g_q: &[i32], g: &ConvGeometry) -> Vec<i32> {
        let g_mat: Vec<T> = widen(nchw_to_channel_major(g_q, g.batch, g.out_channels, g.out_plane()).into_iter());
        let w: Vec<T> = widen(self.weight_q.iter().map(|&v| v as i32));
        let k = g.patch_len();
        let mut dcols = vec![T::zero(); k * g.columns()];
        T::gemm(k, g.out_channels, g.columns(), &w, (1, k as isize), &g_mat, (g.columns() as isize, 1), &mut dcols, false);
        col2im(&dcols, g).into_iter().map(|v| v.to_f64_lossy() as i32).collect()
    }

    /// Input gradient: the upstream gradient is masked by the ReLU in full
    /// precision, quantized with the calibrated gradient scale, and pushed
    /// through the quantized fused kernel with integer arithmetic.
    pub fn backward_input_q(&self, upstream: &Tensor<f32>, forward_out: &Tensor<f32>, input_shape: &[usize]) -> Result<Tensor<f32>> {
        let Some(grad_qp) = self.grad_qp else {
            return state_err("block has no calibrated gradient scale");
        };
        let g = self.geometry(input_shape)?;
        if upstream.shape() != g.output_shape() {
            return dim_err(format!("upstream {:?} for block output {:?}", upstream.shape(), g.output_shape()));
        }
        let masked = if self.spec.has_relu { relu_backward(forward_out, upstream)? } else { upstream.clone() };
        let g_q = quantize_affine(&masked, grad_qp).codes();
        // Each input element collects at most k²·O products.
        let terms = self.spec.kernel_size * self.spec.kernel_size * g.out_channels;
        let dx = if fits_f32(terms) { self.propagate::<f32>(&g_q, &g) } else { self.propagate::<f64>(&g_q, &g) };
        let scale = grad_qp.scale * self.weight_qp.scale;
        Tensor::new(g.input_shape().to_vec(), dx.into_iter().map(|v| v as f32 * scale).collect())
    }

    /// Full-precision fused forward (the reference the integer path approximates).
    pub fn forward_reference(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let y = conv2d_forward(x, &self.fused.weight, &self.fused.bias, self.spec.stride, self.spec.padding)?;
        Ok(if self.spec.has_relu { relu(&y) } else { y })
    }

    /// Full-precision fused input gradient.
    pub fn backward_input_reference(&self, upstream: &Tensor<f32>, forward_out: &Tensor<f32>, input_shape: &[usize]) -> Result<Tensor<f32>> {
        let masked = if self.spec.has_relu { relu_backward(forward_out, upstream)? } else { upstream.clone() };
        conv2d_backward_input(input_shape, &self.fused.weight, &masked, self.spec.stride, self.spec.padding)
    }
}

impl FrozenBlock<f32> for QuantizedConvBlock {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(dequantize(&self.forward_q(&quantize_affine(x, self.input_qp))?))
    }

    fn backward_input(&self, x: &Tensor<f32>, y: &Tensor<f32>, upstream: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.backward_input_q(upstream, y, x.shape())
    }
}

/// A frozen block evaluated at full precision with fixed batch-norm
/// statistics, using exactly the same operations as a trained block in
/// evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatFrozenBlock<T = f32> {
    pub spec: BlockSpec,
    pub params: BlockParams<T>,
    /// Per-channel (mean, variance) the batch norm is held at.
    pub stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> FloatFrozenBlock<T> {
    pub fn new(spec: BlockSpec, params: BlockParams<T>, stats: Option<(Vec<T>, Vec<T>)>) -> Result<Self> {
        match (&spec, &params) {
            (BlockSpec::Input(c) | BlockSpec::Standard(c), BlockParams::Conv(p)) => {
                if p.bn.is_some() != stats.is_some() || c.has_bn != p.bn.is_some() {
                    return state_err("frozen conv block needs statistics exactly when it has batch norm");
                }
            }
            (BlockSpec::Output(_), BlockParams::Output(_)) => {}
            _ => return dim_err("block parameters do not match the block kind"),
        }
        Ok(Self { spec, params, stats })
    }

    fn conv_parts(&self) -> Option<(&ConvSpec, &ConvParams<T>)> {
        match (&self.spec, &self.params) {
            (BlockSpec::Input(s) | BlockSpec::Standard(s), BlockParams::Conv(p)) => Some((s, p)),
            _ => None,
        }
    }
}

impl<T: Real> FrozenBlock<T> for FloatFrozenBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let Some((spec, p)) = self.conv_parts() else {
            let BlockParams::Output(fc) = &self.params else { unreachable!("checked in new") };
            return output_block_forward(x, &fc.weight, &fc.bias);
        };
        let z = conv2d_forward(x, &p.weight, &p.bias, spec.stride, spec.padding)?;
        let pre = match (&p.bn, &self.stats) {
            (Some(bn), Some((mean, var))) => {
                batchnorm_forward(&z, &bn.gamma, &bn.beta, BnMode::FixedStats { mean, var }, T::lit(BN_EPS))?.0
            }
            _ => z,
        };
        Ok(if spec.has_relu { relu(&pre) } else { pre })
    }

    fn backward_input(&self, x: &Tensor<T>, y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let Some((spec, p)) = self.conv_parts() else {
            let BlockParams::Output(fc) = &self.params else { unreachable!("checked in new") };
            return output_block_backward_input(x.shape(), &fc.weight, upstream);
        };
        let mut g = if spec.has_relu { relu_backward(y, upstream)? } else { upstream.clone() };
        if let (Some(bn), Some((_, var))) = (&p.bn, &self.stats) {
            let (n, c, h, w) = g.dims4()?;
            let plane = h * w;
            let eps = T::lit(BN_EPS);
            let data = g.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let s = bn.gamma.data()[ch] / (var[ch] + eps).sqrt();
                    data[(b * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v = *v * s);
                }
            }
        }
        conv2d_backward_input(x.shape(), &p.weight, &g, spec.stride, spec.padding)
    }
}
