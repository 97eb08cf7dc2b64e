//! Splitting a model into full-precision trained blocks and fused, optionally
//! quantized frozen blocks for one local round.

use std::collections::BTreeMap;

use crate::error::{state_err, Result};
use crate::nn::{BlockParams, BlockPlan, BlockSpec, FrozenBlock, ModelParams, ModelTopology, BN_EPS};
use crate::quant::block::{FloatFrozenBlock, QuantizedConvBlock};
use crate::quant::calibrate::CalibrationStats;
use crate::quant::config::{classify_blocks, BlockType, Configuration};
use crate::quant::fusion::{fuse_conv_bn, BnFold};
use crate::quant::quantize::QuantParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyOptions {
    /// Run frozen conv blocks in 8-bit; otherwise they run at full precision
    /// with the calibrated statistics.
    pub quantize: bool,
    /// Mini-batch size of the training steps. Gradient scales were measured
    /// on the calibration batch and are rescaled to this size, since the loss
    /// is a batch mean.
    pub train_batch_size: usize,
}

/// Executable form of a frozen block.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenImpl {
    Quantized(QuantizedConvBlock),
    Float(FloatFrozenBlock<f32>),
}

impl FrozenImpl {
    pub fn is_quantized(&self) -> bool {
        matches!(self, FrozenImpl::Quantized(_))
    }
}

impl FrozenBlock<f32> for FrozenImpl {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            FrozenImpl::Quantized(q) => q.forward(x),
            FrozenImpl::Float(f) => f.forward(x),
        }
    }

    fn backward_input(&self, x: &Tensor<f32>, y: &Tensor<f32>, upstream: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            FrozenImpl::Quantized(q) => q.backward_input(x, y, upstream),
            FrozenImpl::Float(f) => f.backward_input(x, y, upstream),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedModel {
    pub config: Configuration,
    pub block_types: Vec<BlockType>,
    /// Trained blocks at full precision.
    pub w_train: BTreeMap<usize, BlockParams<f32>>,
    /// Frozen blocks in executable form.
    pub w_quant: BTreeMap<usize, FrozenImpl>,
    /// Untouched parameters of the frozen blocks.
    pub frozen_originals: BTreeMap<usize, BlockParams<f32>>,
}

impl PartitionedModel {
    pub fn plan(&self) -> Vec<BlockPlan<'_, f32>> {
        (0..self.block_types.len())
            .map(|i| match (self.w_train.get(&i), self.w_quant.get(&i)) {
                (Some(p), _) => BlockPlan::Trained(p),
                (None, Some(f)) => BlockPlan::Frozen(f as &dyn FrozenBlock<f32>),
                (None, None) => unreachable!("every block is in exactly one partition"),
            })
            .collect()
    }
}

fn build_frozen(
    spec: &BlockSpec,
    params: &BlockParams<f32>,
    cal: &crate::quant::calibrate::BlockCalibration,
    options: ApplyOptions,
    batch_ratio: f32,
) -> Result<FrozenImpl> {
    let (conv, p) = match (spec, params) {
        (BlockSpec::Input(c) | BlockSpec::Standard(c), BlockParams::Conv(p)) if options.quantize => (c, p),
        _ => return Ok(FrozenImpl::Float(FloatFrozenBlock::new(spec.clone(), params.clone(), cal.bn_stats.clone())?)),
    };
    let fold = match (&p.bn, &cal.bn_stats) {
        (Some(bn), Some((mean, var))) => {
            Some(BnFold { gamma: bn.gamma.data(), beta: bn.beta.data(), mean, var })
        }
        (None, None) => None,
        _ => return state_err("calibration statistics do not match the block's batch norm"),
    };
    let fused = fuse_conv_bn(&p.weight, &p.bias, fold, BN_EPS as f32)?;
    let grad_qp = cal.grad_absmax.map(|m| QuantParams::symmetric(m * batch_ratio));
    let (ilo, ihi) = cal.input_range;
    let (olo, ohi) = cal.output_range;
    Ok(FrozenImpl::Quantized(QuantizedConvBlock::new(
        conv.clone(),
        fused,
        QuantParams::affine(ilo, ihi),
        QuantParams::affine(olo, ohi),
        grad_qp,
    )?))
}

/// Partitions `model` under `config` using this round's calibration.
pub fn apply_configuration(
    topology: &ModelTopology,
    model: &ModelParams<f32>,
    config: &Configuration,
    stats: &CalibrationStats,
    options: ApplyOptions,
) -> Result<PartitionedModel> {
    let n = topology.n_blocks();
    if stats.config != *config || stats.n_blocks != n {
        return state_err(format!("calibration was made for {} and cannot be applied to {config}", stats.config));
    }
    model.check_against(topology)?;
    let block_types = classify_blocks(config, n)?;
    let batch_ratio = stats.calibration_batch_size as f32 / options.train_batch_size.max(1) as f32;
    let mut w_train = BTreeMap::new();
    let mut w_quant = BTreeMap::new();
    let mut frozen_originals = BTreeMap::new();
    for (i, t) in block_types.iter().enumerate() {
        let params = &model.blocks[i];
        if t.is_trained() {
            w_train.insert(i, params.clone());
            continue;
        }
        let Some(cal) = stats.blocks.get(&i) else {
            return state_err(format!("no calibration record for frozen block {i}"));
        };
        w_quant.insert(i, build_frozen(&topology.blocks[i], params, cal, options, batch_ratio)?);
        frozen_originals.insert(i, params.clone());
    }
    Ok(PartitionedModel { config: *config, block_types, w_train, w_quant, frozen_originals })
}
