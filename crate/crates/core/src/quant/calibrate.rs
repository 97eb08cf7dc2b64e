//! Per-round calibration of frozen blocks: batch-norm statistics, activation
//! ranges and the range of the gradients flowing into type-(d) blocks.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::error::{dim_err, input_err, Result};
use crate::nn::{
    model_backward, model_forward, softmax_cross_entropy, BlockCache, BlockPlan, FrozenBlock,
    ModelParams, ModelTopology, Phase,
};
use crate::quant::block::FloatFrozenBlock;
use crate::quant::config::{classify_blocks, BlockType, Configuration};
use crate::tensor::Tensor;

/// Calibration record of one frozen block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCalibration {
    pub block_type: BlockType,
    /// Batch mean and biased variance of the convolution output, if the block
    /// has batch norm.
    pub bn_stats: Option<(Vec<f32>, Vec<f32>)>,
    /// Min and max of the block input over the calibration batch.
    pub input_range: (f32, f32),
    /// Min and max of the block output under the calibrated statistics.
    pub output_range: (f32, f32),
    /// Largest ReLU-masked upstream gradient magnitude (type (d) only), for a
    /// loss averaged over `calibration_batch_size` samples.
    pub grad_absmax: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub config: Configuration,
    pub n_blocks: usize,
    pub calibration_batch_size: usize,
    /// One entry per frozen block.
    pub blocks: BTreeMap<usize, BlockCalibration>,
}

/// Float frozen block that records the largest masked upstream gradient.
struct GradProbe<'a> {
    inner: &'a FloatFrozenBlock<f32>,
    has_relu: bool,
    absmax: Mutex<f32>,
}

impl FrozenBlock<f32> for GradProbe<'_> {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.inner.forward(x)
    }

    fn backward_input(&self, x: &Tensor<f32>, y: &Tensor<f32>, upstream: &Tensor<f32>) -> Result<Tensor<f32>> {
        let masked = if self.has_relu { crate::nn::relu_backward(y, upstream)? } else { upstream.clone() };
        let mut m = self.absmax.lock().expect("probe lock");
        *m = m.max(masked.max_abs());
        drop(m);
        self.inner.backward_input(x, y, upstream)
    }
}

/// Runs the calibration batch through the full-precision network (batch
/// statistics everywhere) and, if the configuration has type-(d) blocks, one
/// backward pass with the frozen blocks held at those statistics.
pub fn calibrate_round(
    topology: &ModelTopology,
    model: &ModelParams<f32>,
    config: &Configuration,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<CalibrationStats> {
    let n = topology.n_blocks();
    let types = classify_blocks(config, n)?;
    model.check_against(topology)?;
    let batch = x.shape().first().copied().unwrap_or(0);
    if batch == 0 || x.is_empty() {
        return input_err("calibration batch is empty");
    }
    if labels.len() != batch {
        return dim_err(format!("{} labels for a calibration batch of {batch}", labels.len()));
    }

    let plan: Vec<_> = model.blocks.iter().map(BlockPlan::Trained).collect();
    let (logits, cache) = model_forward(topology, &plan, x, Phase::Train)?;
    let input_of = |i: usize| match &cache.blocks[i] {
        Some(BlockCache::Conv { input, .. } | BlockCache::Output { input }) => input,
        _ => unreachable!("every block is cached when block 0 is trained"),
    };

    let mut blocks = BTreeMap::new();
    for (i, &t) in types.iter().enumerate() {
        if t.is_trained() {
            continue;
        }
        let output = if i + 1 < n { input_of(i + 1) } else { &logits };
        let bn_stats = cache.batch_stats(i).map(|(m, v)| (m.to_vec(), v.to_vec()));
        blocks.insert(
            i,
            BlockCalibration {
                block_type: t,
                bn_stats,
                input_range: input_of(i).min_max(),
                output_range: output.min_max(),
                grad_absmax: None,
            },
        );
    }

    if types.contains(&BlockType::FrozenAfter) {
        let floats = blocks
            .iter()
            .map(|(&i, c)| {
                FloatFrozenBlock::new(topology.blocks[i].clone(), model.blocks[i].clone(), c.bn_stats.clone())
                    .map(|f| (i, f))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let probes: BTreeMap<usize, GradProbe> = floats
            .iter()
            .map(|(&i, f)| {
                let has_relu = topology.blocks[i].conv().is_some_and(|c| c.has_relu);
                (i, GradProbe { inner: f, has_relu, absmax: Mutex::new(0.0) })
            })
            .collect();
        let plan: Vec<BlockPlan<f32>> = (0..n)
            .map(|i| match probes.get(&i) {
                Some(p) => BlockPlan::Frozen(p as &dyn FrozenBlock<f32>),
                None => BlockPlan::Trained(&model.blocks[i]),
            })
            .collect();
        let (logits, cache) = model_forward(topology, &plan, x, Phase::Train)?;
        let (_, grad) = softmax_cross_entropy(&logits, labels)?;
        model_backward(topology, &plan, &cache, &grad)?;
        for (i, p) in probes {
            if types[i] == BlockType::FrozenAfter {
                let m = p.absmax.into_inner().expect("probe lock");
                blocks.get_mut(&i).expect("frozen block recorded").grad_absmax = Some(m);
            }
        }
    }

    Ok(CalibrationStats { config: *config, n_blocks: n, calibration_batch_size: batch, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockParams, ConvSpec, OutputSpec};
    use crate::nn::BlockSpec;
    use crate::quant::quantize::QuantParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topology() -> ModelTopology {
        let conv = |cin, cout| ConvSpec {
            kernel_size: 3,
            in_channels: cin,
            out_channels: cout,
            stride: 1,
            padding: 1,
            has_bn: true,
            has_relu: true,
        };
        ModelTopology {
            input_channels: 1,
            input_height: 5,
            input_width: 5,
            blocks: vec![
                BlockSpec::Input(conv(1, 3)),
                BlockSpec::Standard(conv(3, 4)),
                BlockSpec::Standard(conv(4, 4)),
                BlockSpec::Output(OutputSpec { in_features: 4, num_classes: 3 }),
            ],
        }
    }

    fn setup(seed: u64) -> (ModelTopology, ModelParams<f32>, Tensor<f32>, Vec<usize>) {
        let t = topology();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ModelParams::init(&t, &mut rng).unwrap();
        let x = crate::nn::testing::rand_tensor(&[6, 1, 5, 5], &mut rng);
        (t, m, x, vec![0, 1, 2, 0, 1, 2])
    }

    #[test]
    fn records_every_frozen_block_once() {
        let (t, m, x, y) = setup(1);
        let c = Configuration::range(1, 1).unwrap();
        let s = calibrate_round(&t, &m, &c, &x, &y).unwrap();
        assert_eq!(s.blocks.keys().copied().collect::<Vec<_>>(), vec![0, 2, 3]);
        assert!(s.blocks[&0].grad_absmax.is_none());
        assert!(s.blocks[&2].grad_absmax.unwrap() > 0.0);
        assert!(s.blocks[&3].bn_stats.is_none());
        for b in s.blocks.values() {
            if let Some((_, var)) = &b.bn_stats {
                assert!(var.iter().all(|v| *v >= 0.0));
            }
        }
        assert_eq!(s.calibration_batch_size, 6);
    }

    #[test]
    fn deterministic() {
        let (t, m, x, y) = setup(2);
        let c = Configuration::range(0, 1).unwrap();
        assert_eq!(calibrate_round(&t, &m, &c, &x, &y).unwrap(), calibrate_round(&t, &m, &c, &x, &y).unwrap());
    }

    #[test]
    fn constant_activations_floor_the_scale() {
        let (t, mut m, _, _) = setup(3);
        if let BlockParams::Conv(c) = &mut m.blocks[0] {
            c.weight = Tensor::zeros(c.weight.shape());
        }
        let x = Tensor::full(&[2, 1, 5, 5], 0.7);
        let c = Configuration::range(3, 3).unwrap();
        let s = calibrate_round(&t, &m, &c, &x, &[0, 1]).unwrap();
        let (_, var) = s.blocks[&0].bn_stats.clone().unwrap();
        assert!(var.iter().all(|v| *v == 0.0));
        let (lo, hi) = s.blocks[&0].output_range;
        assert_eq!(QuantParams::affine(lo, hi).scale, crate::quant::quantize::SCALE_FLOOR);
    }

    #[test]
    fn empty_batch_rejected() {
        let (t, m, _, _) = setup(4);
        let x = Tensor::zeros(&[0, 1, 5, 5]);
        let c = Configuration::range(0, 0).unwrap();
        assert!(matches!(calibrate_round(&t, &m, &c, &x, &[]), Err(crate::Error::Input(_))));
    }
}
