//! Per-tensor 8-bit quantization: symmetric signed for weights and gradients,
//! affine unsigned for activations.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Smallest scale ever produced; constant tensors would otherwise give zero.
pub const SCALE_FLOOR: f32 = 1e-8;

const I8_LIMIT: i32 = 127;
const U8_MAX: i32 = 255;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub signed: bool,
}

impl QuantParams {
    /// Symmetric signed parameters covering `[-absmax, absmax]`.
    pub fn symmetric(absmax: f32) -> Self {
        Self { scale: (absmax.abs() / I8_LIMIT as f32).max(SCALE_FLOOR), zero_point: 0, signed: true }
    }

    /// Unsigned affine parameters covering `[min, max]` widened to contain 0.
    pub fn affine(min: f32, max: f32) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / U8_MAX as f32).max(SCALE_FLOOR);
        let zero_point = (-lo / scale).round_ties_even().clamp(0.0, U8_MAX as f32) as i32;
        Self { scale, zero_point, signed: false }
    }

    pub fn qmin(&self) -> i32 {
        if self.signed {
            -I8_LIMIT
        } else {
            0
        }
    }

    pub fn qmax(&self) -> i32 {
        if self.signed {
            I8_LIMIT
        } else {
            U8_MAX
        }
    }

    /// Quantizes one value to its integer code.
    #[inline]
    pub fn code(&self, x: f32) -> i32 {
        ((x / self.scale).round_ties_even() as i32 + self.zero_point).clamp(self.qmin(), self.qmax())
    }

    #[inline]
    pub fn value(&self, q: i32) -> f32 {
        self.scale * (q - self.zero_point) as f32
    }

    /// Largest magnitude representable without saturation on either side.
    pub fn range(&self) -> (f32, f32) {
        (self.value(self.qmin()), self.value(self.qmax()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantData {
    I8(Vec<i8>),
    U8(Vec<u8>),
}

/// An 8-bit tensor with its quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub data: QuantData,
    pub params: QuantParams,
}

impl QuantTensor {
    pub fn len(&self) -> usize {
        match &self.data {
            QuantData::I8(v) => v.len(),
            QuantData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integer codes widened to `i32`.
    pub fn codes(&self) -> Vec<i32> {
        match &self.data {
            QuantData::I8(v) => v.iter().map(|&q| q as i32).collect(),
            QuantData::U8(v) => v.iter().map(|&q| q as i32).collect(),
        }
    }

    /// `q − zero_point` for every element.
    pub fn centered(&self) -> Vec<i32> {
        let zp = self.params.zero_point;
        match &self.data {
            QuantData::I8(v) => v.iter().map(|&q| q as i32 - zp).collect(),
            QuantData::U8(v) => v.iter().map(|&q| q as i32 - zp).collect(),
        }
    }

    /// Builds a tensor from integer codes already inside the parameter range.
    pub fn from_codes(shape: Vec<usize>, codes: &[i32], params: QuantParams) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return dim_err(format!("{} codes for shape {shape:?}", codes.len()));
        }
        let data = if params.signed {
            QuantData::I8(codes.iter().map(|&q| q.clamp(-128, 127) as i8).collect())
        } else {
            QuantData::U8(codes.iter().map(|&q| q.clamp(0, 255) as u8).collect())
        };
        Ok(Self { shape, data, params })
    }
}

/// `clamp(round(x / scale) + zero_point)`, rounding half to even.
pub fn quantize_affine(x: &Tensor<f32>, params: QuantParams) -> QuantTensor {
    let data = if params.signed {
        QuantData::I8(x.data().iter().map(|&v| params.code(v) as i8).collect())
    } else {
        QuantData::U8(x.data().iter().map(|&v| params.code(v) as u8).collect())
    };
    QuantTensor { shape: x.shape().to_vec(), data, params }
}

/// `scale · (q − zero_point)`.
pub fn dequantize(q: &QuantTensor) -> Tensor<f32> {
    let p = q.params;
    let data = q.codes().into_iter().map(|c| p.value(c)).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor keeps a consistent shape")
}
