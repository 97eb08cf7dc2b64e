//! Network topology, parameter storage and initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::nn::conv::conv_out_extent;
use crate::tensor::{Real, Tensor};

fn yes() -> bool {
    true
}

/// One convolution (optionally followed by batch norm and ReLU).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "yes")]
    pub has_bn: bool,
    #[serde(default = "yes")]
    pub has_relu: bool,
}

/// Global average pooling followed by a fully connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub in_features: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockSpec {
    Input(ConvSpec),
    Standard(ConvSpec),
    Output(OutputSpec),
}

impl BlockSpec {
    pub fn conv(&self) -> Option<&ConvSpec> {
        match self {
            BlockSpec::Input(c) | BlockSpec::Standard(c) => Some(c),
            BlockSpec::Output(_) => None,
        }
    }
}

/// Input block, standard blocks and output block, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTopology {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub blocks: Vec<BlockSpec>,
}

/// Per-sample activation shape `(C, H, W)` entering and leaving a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

impl ModelTopology {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        match self.blocks.last() {
            Some(BlockSpec::Output(o)) => o.num_classes,
            _ => 0,
        }
    }

    /// Checks the block sequence and returns the per-block activation shapes.
    /// The output block's output shape is `(num_classes, 1, 1)`.
    pub fn shapes(&self) -> Result<Vec<BlockShape>> {
        let n = self.blocks.len();
        if n < 2 {
            return input_err("a network needs at least an input block and an output block");
        }
        let mut cur = (self.input_channels, self.input_height, self.input_width);
        if cur.0 == 0 || cur.1 == 0 || cur.2 == 0 {
            return input_err("input dimensions must be positive");
        }
        let mut out = Vec::with_capacity(n);
        for (i, block) in self.blocks.iter().enumerate() {
            let expected_kind = if i == 0 {
                "input"
            } else if i == n - 1 {
                "output"
            } else {
                "standard"
            };
            let kind = match block {
                BlockSpec::Input(_) => "input",
                BlockSpec::Standard(_) => "standard",
                BlockSpec::Output(_) => "output",
            };
            if kind != expected_kind {
                return input_err(format!("block {i} is '{kind}', expected '{expected_kind}'"));
            }
            let next = match block {
                BlockSpec::Input(c) | BlockSpec::Standard(c) => {
                    if kind == "standard" && !(c.has_bn && c.has_relu) {
                        return input_err(format!("standard block {i} must be a conv-bn-relu combination"));
                    }
                    if c.in_channels != cur.0 {
                        return dim_err(format!(
                            "block {i} expects {} input channels, previous block produces {}",
                            c.in_channels, cur.0
                        ));
                    }
                    if c.out_channels == 0 || c.kernel_size == 0 || c.stride == 0 {
                        return input_err(format!("block {i} has a zero-sized kernel, stride or channel count"));
                    }
                    let (Some(h), Some(w)) = (
                        conv_out_extent(cur.1, c.kernel_size, c.stride, c.padding),
                        conv_out_extent(cur.2, c.kernel_size, c.stride, c.padding),
                    ) else {
                        return dim_err(format!(
                            "block {i}: kernel {} stride {} padding {} does not tile {}x{}",
                            c.kernel_size, c.stride, c.padding, cur.1, cur.2
                        ));
                    };
                    (c.out_channels, h, w)
                }
                BlockSpec::Output(o) => {
                    if o.in_features != cur.0 {
                        return dim_err(format!(
                            "output block expects {} features, previous block produces {} channels",
                            o.in_features, cur.0
                        ));
                    }
                    if o.num_classes < 2 {
                        return input_err("output block needs at least two classes");
                    }
                    (o.num_classes, 1, 1)
                }
            };
            out.push(BlockShape { input: cur, output: next });
            cur = next;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `out × in × k × k`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BnParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T = f32> {
    /// `classes × features`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams<T = f32> {
    Conv(ConvParams<T>),
    Output(FcParams<T>),
}

impl<T: Real> BlockParams<T> {
    /// Tensors updated by gradient descent, in gradient order:
    /// conv weight, conv bias, [gamma, beta] or fc weight, fc bias.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        match self {
            BlockParams::Conv(c) => {
                let mut v = vec![&c.weight, &c.bias];
                if let Some(bn) = &c.bn {
                    v.extend([&bn.gamma, &bn.beta]);
                }
                v
            }
            BlockParams::Output(f) => vec![&f.weight, &f.bias],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            BlockParams::Conv(c) => {
                let mut v = vec![&mut c.weight, &mut c.bias];
                if let Some(bn) = &mut c.bn {
                    v.extend([&mut bn.gamma, &mut bn.beta]);
                }
                v
            }
            BlockParams::Output(f) => vec![&mut f.weight, &mut f.bias],
        }
    }

    /// Every stored tensor including batch-norm running statistics, i.e.
    /// everything that is uploaded and aggregated.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.trainable();
        if let BlockParams::Conv(ConvParams { bn: Some(bn), .. }) = self {
            v.extend([&bn.running_mean, &bn.running_var]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            BlockParams::Conv(c) => {
                let mut v = vec![&mut c.weight, &mut c.bias];
                if let Some(bn) = &mut c.bn {
                    v.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]);
                }
                v
            }
            BlockParams::Output(f) => vec![&mut f.weight, &mut f.bias],
        }
    }

    /// Number of stored scalars (including running statistics).
    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> BlockParams<U> {
        match self {
            BlockParams::Conv(c) => BlockParams::Conv(ConvParams {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                bn: c.bn.as_ref().map(|bn| BnParams {
                    gamma: bn.gamma.cast(),
                    beta: bn.beta.cast(),
                    running_mean: bn.running_mean.cast(),
                    running_var: bn.running_var.cast(),
                }),
            }),
            BlockParams::Output(f) => BlockParams::Output(FcParams { weight: f.weight.cast(), bias: f.bias.cast() }),
        }
    }

    fn matches(&self, spec: &BlockSpec) -> bool {
        match (self, spec) {
            (BlockParams::Conv(p), BlockSpec::Input(c) | BlockSpec::Standard(c)) => {
                p.weight.shape() == [c.out_channels, c.in_channels, c.kernel_size, c.kernel_size]
                    && p.bias.shape() == [c.out_channels]
                    && p.bn.is_some() == c.has_bn
                    && p.bn.as_ref().is_none_or(|bn| {
                        [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                            .iter()
                            .all(|t| t.shape() == [c.out_channels])
                    })
            }
            (BlockParams::Output(p), BlockSpec::Output(o)) => {
                p.weight.shape() == [o.num_classes, o.in_features] && p.bias.shape() == [o.num_classes]
            }
            _ => false,
        }
    }
}

/// Parameters of all `N+1` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub blocks: Vec<BlockParams<T>>,
}

impl<T: Real> ModelParams<T> {
    /// He-normal convolution weights, `N(0, 1/fan_in)` classifier weights,
    /// zero biases, unit gamma, zero beta, running statistics (0, 1).
    pub fn init(topology: &ModelTopology, rng: &mut impl Rng) -> Result<Self> {
        topology.shapes()?;
        let blocks = topology
            .blocks
            .iter()
            .map(|spec| match spec {
                BlockSpec::Input(c) | BlockSpec::Standard(c) => {
                    let fan_in = (c.in_channels * c.kernel_size * c.kernel_size) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    let shape = [c.out_channels, c.in_channels, c.kernel_size, c.kernel_size];
                    let weight = Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng)));
                    let oc = [c.out_channels];
                    BlockParams::Conv(ConvParams {
                        weight,
                        bias: Tensor::zeros(&oc),
                        bn: c.has_bn.then(|| BnParams {
                            gamma: Tensor::full(&oc, T::one()),
                            beta: Tensor::zeros(&oc),
                            running_mean: Tensor::zeros(&oc),
                            running_var: Tensor::full(&oc, T::one()),
                        }),
                    })
                }
                BlockSpec::Output(o) => {
                    let normal = Normal::new(0.0, (1.0 / o.in_features as f64).sqrt()).expect("valid std");
                    let weight = Tensor::from_fn(&[o.num_classes, o.in_features], |_| T::lit(normal.sample(rng)));
                    BlockParams::Output(FcParams { weight, bias: Tensor::zeros(&[o.num_classes]) })
                }
            })
            .collect();
        Ok(Self { blocks })
    }

    pub fn check_against(&self, topology: &ModelTopology) -> Result<()> {
        if self.blocks.len() != topology.blocks.len() {
            return dim_err(format!(
                "{} parameter blocks for a {}-block topology",
                self.blocks.len(),
                topology.blocks.len()
            ));
        }
        for (i, (p, s)) in self.blocks.iter().zip(&topology.blocks).enumerate() {
            if !p.matches(s) {
                return dim_err(format!("parameters of block {i} do not match its spec"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { blocks: self.blocks.iter().map(BlockParams::cast).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.tensors().iter().all(|t| t.all_finite()))
    }
}

/// `w − lr · g`.
pub fn sgd_step<T: Real>(w: &Tensor<T>, g: &Tensor<T>, lr: T) -> Result<Tensor<T>> {
    w.ensure_same_shape(g, "sgd gradient")?;
    if lr < T::zero() {
        return input_err("learning rate must be non-negative");
    }
    let data = w.data().iter().zip(g.data()).map(|(&w, &g)| w - lr * g).collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// In-place [`sgd_step`] over a block's trainable tensors.
pub fn sgd_update_block<T: Real>(params: &mut BlockParams<T>, grads: &[Tensor<T>], lr: T) -> Result<()> {
    let targets = params.trainable_mut();
    if targets.len() != grads.len() {
        return dim_err(format!("{} gradients for {} trainable tensors", grads.len(), targets.len()));
    }
    for (w, g) in targets.into_iter().zip(grads) {
        *w = sgd_step(w, g, lr)?;
    }
    Ok(())
}
