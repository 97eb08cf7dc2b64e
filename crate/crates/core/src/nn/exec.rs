//! Forward and backward passes over a per-block execution plan.
//!
//! Each block is either trained (full-precision forward, parameter gradients)
//! or frozen (an opaque [`FrozenBlock`]). Let `l` be the first trained block:
//! blocks before `l` only run forward and keep nothing, block `l` produces
//! parameter gradients but no input gradient, and every block after `l`
//! produces an input gradient exactly once. Backpropagation stops at `l`.

use std::collections::BTreeMap;

use crate::error::{dim_err, state_err, Result};
use crate::nn::activation::{relu, relu_backward};
use crate::nn::batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnMode, BN_EPS};
use crate::nn::conv::{conv2d_backward_input, conv2d_backward_params, conv2d_forward};
use crate::nn::head::{output_block_backward_input, output_block_backward_params, output_block_forward};
use crate::nn::model::{BlockParams, BlockSpec, ConvParams, ConvSpec, FcParams, ModelParams, ModelTopology};
use crate::tensor::{Real, Tensor};

/// Which statistics trained blocks normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics (local training).
    Train,
    /// Each block's running statistics (evaluation).
    Eval,
}

/// A block whose parameters are held fixed.
pub trait FrozenBlock<T: Real>: Send + Sync {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Gradient with respect to the block input, given the input and output of
    /// the forward call and the upstream gradient.
    fn backward_input(&self, x: &Tensor<T>, y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>>;
}

pub enum BlockPlan<'a, T: Real> {
    Trained(&'a BlockParams<T>),
    Frozen(&'a dyn FrozenBlock<T>),
}

impl<T: Real> BlockPlan<'_, T> {
    pub fn is_trained(&self) -> bool {
        matches!(self, BlockPlan::Trained(_))
    }
}

/// Plan that trains every block.
pub fn all_trained_plan<T: Real>(model: &ModelParams<T>) -> Vec<BlockPlan<'_, T>> {
    model.blocks.iter().map(BlockPlan::Trained).collect()
}

pub enum BlockCache<T> {
    Conv { input: Tensor<T>, bn: Option<BnCache<T>>, pre_relu: Tensor<T> },
    Output { input: Tensor<T> },
    Frozen { input: Tensor<T>, output: Tensor<T> },
}

/// Per-block state for [`model_backward`]. Entries before the first trained
/// block are `None`.
pub struct ForwardCache<T> {
    pub blocks: Vec<Option<BlockCache<T>>>,
    pub first_trained: Option<usize>,
}

impl<T: Real> ForwardCache<T> {
    pub fn cached_blocks(&self) -> Vec<usize> {
        self.blocks.iter().enumerate().filter_map(|(i, c)| c.as_ref().map(|_| i)).collect()
    }

    /// Batch statistics used by a trained conv block, if any.
    pub fn batch_stats(&self, block: usize) -> Option<(&[T], &[T])> {
        match self.blocks.get(block)? {
            Some(BlockCache::Conv { bn: Some(bn), .. }) if bn.batch_stats => Some((&bn.mean, &bn.var)),
            _ => None,
        }
    }
}

/// Parameter gradients of the trained blocks, plus the list of blocks that
/// computed an intermediate (input) gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: BTreeMap<usize, Vec<Tensor<T>>>,
    pub input_grad_blocks: Vec<usize>,
}

fn conv_block_forward<T: Real>(
    spec: &ConvSpec,
    p: &ConvParams<T>,
    x: &Tensor<T>,
    phase: Phase,
) -> Result<(Tensor<T>, Option<BnCache<T>>, Tensor<T>)> {
    let z = conv2d_forward(x, &p.weight, &p.bias, spec.stride, spec.padding)?;
    let (pre, bn_cache) = match &p.bn {
        Some(bn) => {
            let mode = match phase {
                Phase::Train => BnMode::BatchStats,
                Phase::Eval => BnMode::FixedStats { mean: bn.running_mean.data(), var: bn.running_var.data() },
            };
            let (y, c) = batchnorm_forward(&z, &bn.gamma, &bn.beta, mode, T::lit(BN_EPS))?;
            (y, Some(c))
        }
        None => (z, None),
    };
    let out = if spec.has_relu { relu(&pre) } else { pre.clone() };
    Ok((out, bn_cache, pre))
}

fn check_plan<T: Real>(topology: &ModelTopology, plan: &[BlockPlan<'_, T>]) -> Result<()> {
    if plan.len() != topology.blocks.len() {
        return dim_err(format!("plan has {} entries for {} blocks", plan.len(), topology.blocks.len()));
    }
    Ok(())
}

fn trained_forward<T: Real>(
    spec: &BlockSpec,
    params: &BlockParams<T>,
    x: Tensor<T>,
    phase: Phase,
    keep: bool,
) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
    match (spec, params) {
        (BlockSpec::Input(s) | BlockSpec::Standard(s), BlockParams::Conv(p)) => {
            let (y, bn, pre_relu) = conv_block_forward(s, p, &x, phase)?;
            Ok((y, keep.then_some(BlockCache::Conv { input: x, bn, pre_relu })))
        }
        (BlockSpec::Output(_), BlockParams::Output(p)) => {
            let y = output_block_forward(&x, &p.weight, &p.bias)?;
            Ok((y, keep.then_some(BlockCache::Output { input: x })))
        }
        _ => dim_err("block parameters do not match the block kind"),
    }
}

/// Runs `f_N(…f_0(x_0))` and caches what the backward pass needs.
pub fn model_forward<T: Real>(
    topology: &ModelTopology,
    plan: &[BlockPlan<'_, T>],
    x0: &Tensor<T>,
    phase: Phase,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_plan(topology, plan)?;
    let first_trained = plan.iter().position(BlockPlan::is_trained);
    let mut blocks = Vec::with_capacity(plan.len());
    let mut x = x0.clone();
    for (i, (spec, step)) in topology.blocks.iter().zip(plan).enumerate() {
        let keep = first_trained.is_some_and(|l| i >= l);
        let (y, cache) = match step {
            BlockPlan::Trained(p) => trained_forward(spec, p, x, phase, keep)?,
            BlockPlan::Frozen(f) => {
                let y = f.forward(&x)?;
                let cache = keep.then(|| BlockCache::Frozen { input: x, output: y.clone() });
                (y, cache)
            }
        };
        blocks.push(cache);
        x = y;
    }
    Ok((x, ForwardCache { blocks, first_trained }))
}

/// Forward pass without caching anything.
pub fn model_infer<T: Real>(
    topology: &ModelTopology,
    plan: &[BlockPlan<'_, T>],
    x0: &Tensor<T>,
    phase: Phase,
) -> Result<Tensor<T>> {
    check_plan(topology, plan)?;
    let mut x = x0.clone();
    for (spec, step) in topology.blocks.iter().zip(plan) {
        x = match step {
            BlockPlan::Trained(p) => trained_forward(spec, p, x, phase, false)?.0,
            BlockPlan::Frozen(f) => f.forward(&x)?,
        };
    }
    Ok(x)
}

/// Evaluation-mode logits of a plain model.
pub fn predict<T: Real>(topology: &ModelTopology, model: &ModelParams<T>, x0: &Tensor<T>) -> Result<Tensor<T>> {
    model_infer(topology, &all_trained_plan(model), x0, Phase::Eval)
}

fn conv_block_backward<T: Real>(
    spec: &ConvSpec,
    p: &ConvParams<T>,
    input: &Tensor<T>,
    bn: Option<&BnCache<T>>,
    pre_relu: &Tensor<T>,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<(Vec<Tensor<T>>, Option<Tensor<T>>)> {
    let mut g = if spec.has_relu { relu_backward(pre_relu, upstream)? } else { upstream.clone() };
    let mut bn_grads = None;
    if let Some(cache) = bn {
        let (gz, gg, gb) = batchnorm_backward(cache, &g)?;
        g = gz;
        bn_grads = Some((gg, gb));
    }
    let (gw, gbias) = conv2d_backward_params(input, &p.weight, &g, spec.stride, spec.padding)?;
    let mut grads = vec![gw, gbias];
    if let Some((gg, gb)) = bn_grads {
        grads.extend([gg, gb]);
    }
    let gx = if need_input {
        Some(conv2d_backward_input(input.shape(), &p.weight, &g, spec.stride, spec.padding)?)
    } else {
        None
    };
    Ok((grads, gx))
}

fn output_backward<T: Real>(
    p: &FcParams<T>,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    need_input: bool,
) -> Result<(Vec<Tensor<T>>, Option<Tensor<T>>)> {
    let (gw, gb) = output_block_backward_params(input, &p.weight, upstream)?;
    let gx = if need_input { Some(output_block_backward_input(input.shape(), &p.weight, upstream)?) } else { None };
    Ok((vec![gw, gb], gx))
}

/// Reverse pass from `grad_logits` down to the first trained block.
pub fn model_backward<T: Real>(
    topology: &ModelTopology,
    plan: &[BlockPlan<'_, T>],
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Gradients<T>> {
    check_plan(topology, plan)?;
    if cache.blocks.len() != plan.len() {
        return state_err("forward cache was produced for a different network");
    }
    let first = plan.iter().position(BlockPlan::is_trained);
    if first != cache.first_trained {
        return state_err("forward cache was produced with a different partition");
    }
    let mut grads = Gradients { blocks: BTreeMap::new(), input_grad_blocks: Vec::new() };
    let Some(first) = first else {
        return Ok(grads);
    };
    let mut upstream = grad_logits.clone();
    for i in (first..plan.len()).rev() {
        let need_input = i > first;
        let Some(block_cache) = &cache.blocks[i] else {
            return state_err(format!("missing forward cache for block {i}"));
        };
        let gx = match (&plan[i], block_cache, &topology.blocks[i]) {
            (
                BlockPlan::Trained(BlockParams::Conv(p)),
                BlockCache::Conv { input, bn, pre_relu },
                BlockSpec::Input(s) | BlockSpec::Standard(s),
            ) => {
                let (g, gx) = conv_block_backward(s, p, input, bn.as_ref(), pre_relu, &upstream, need_input)?;
                grads.blocks.insert(i, g);
                gx
            }
            (BlockPlan::Trained(BlockParams::Output(p)), BlockCache::Output { input }, BlockSpec::Output(_)) => {
                let (g, gx) = output_backward(p, input, &upstream, need_input)?;
                grads.blocks.insert(i, g);
                gx
            }
            (BlockPlan::Frozen(f), BlockCache::Frozen { input, output }, _) => {
                debug_assert!(need_input, "a frozen block at the first trained index is impossible");
                Some(f.backward_input(input, output, &upstream)?)
            }
            _ => return state_err(format!("plan and forward cache disagree at block {i}")),
        };
        if let Some(gx) = gx {
            grads.input_grad_blocks.push(i);
            upstream = gx;
        }
    }
    grads.input_grad_blocks.reverse();
    Ok(grads)
}

/// Exponential moving average of batch statistics into the running buffers
/// of the given block.
pub fn update_running_stats<T: Real>(
    params: &mut BlockParams<T>,
    cache: &ForwardCache<T>,
    block: usize,
    momentum: T,
) {
    let (Some((mean, var)), BlockParams::Conv(ConvParams { bn: Some(bn), .. })) = (cache.batch_stats(block), params)
    else {
        return;
    };
    let keep = T::one() - momentum;
    for (r, &m) in bn.running_mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in bn.running_var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + momentum * v;
    }
}
