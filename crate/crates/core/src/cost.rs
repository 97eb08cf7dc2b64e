//! Analytic cost model: multiply-accumulate counts per block and pass,
//! per-device time estimates and upload sizes of configurations.

use serde::{Deserialize, Serialize};

use crate::client::enumerate_contiguous;
use crate::error::{input_err, Result};
use crate::nn::{BlockSpec, ModelTopology};
use crate::quant::{classify_blocks, BlockType, Configuration};

/// Bytes per uploaded parameter (32-bit floats).
pub const BYTES_PER_PARAM: u64 = 4;

/// Compute characteristics of one class of device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    /// Full-precision MACs per second.
    pub float_mac_rate: f64,
    /// Cost of an 8-bit MAC relative to a full-precision one.
    pub quant_cost_factor: f64,
    /// Fixed seconds per training batch.
    #[serde(default)]
    pub overhead_per_batch: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.float_mac_rate.is_finite() && self.float_mac_rate > 0.0) {
            return input_err(format!("profile '{}': float_mac_rate must be positive", self.name));
        }
        if !(self.quant_cost_factor > 0.0 && self.quant_cost_factor <= 1.0) {
            return input_err(format!("profile '{}': quant_cost_factor must be in (0, 1]", self.name));
        }
        if !(self.overhead_per_batch.is_finite() && self.overhead_per_batch >= 0.0) {
            return input_err(format!("profile '{}': overhead_per_batch must be non-negative", self.name));
        }
        Ok(())
    }

    /// The same device when frozen blocks run at full precision.
    pub fn without_quantization(&self) -> Self {
        Self { quant_cost_factor: 1.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockMacs {
    pub forward: u64,
    pub backward_input: u64,
    pub backward_param: u64,
}

/// Batch sizes and step count that determine a round's work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostHyper {
    pub batch_size: usize,
    pub batches_per_round: usize,
    pub calibration_batch_size: usize,
}

/// MACs per block for a batch. A convolution costs `B·Ho·Wo·k²·Cin·Cout`
/// in every pass; batch norm and ReLU cost one MAC per output element each;
/// global average pooling is free; the classifier costs `B·C·K`.
pub fn block_mac_counts(topology: &ModelTopology, batch_size: usize) -> Result<Vec<BlockMacs>> {
    let shapes = topology.shapes()?;
    let b = batch_size as u64;
    Ok(topology
        .blocks
        .iter()
        .zip(&shapes)
        .map(|(spec, shape)| match spec {
            BlockSpec::Input(c) | BlockSpec::Standard(c) => {
                let (co, ho, wo) = shape.output;
                let out_elems = b * (co * ho * wo) as u64;
                let conv = out_elems * (c.kernel_size * c.kernel_size * c.in_channels) as u64;
                let bn = if c.has_bn { out_elems } else { 0 };
                let relu = if c.has_relu { out_elems } else { 0 };
                BlockMacs { forward: conv + bn + relu, backward_input: conv + bn + relu, backward_param: conv + bn }
            }
            BlockSpec::Output(o) => {
                let fc = b * (o.in_features * o.num_classes) as u64;
                BlockMacs { forward: fc, backward_input: fc, backward_param: fc }
            }
        })
        .collect())
}

/// Estimated round time split by origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimeBreakdown {
    /// Training steps' MACs divided by the MAC rate.
    pub training: f64,
    /// One full-precision forward pass over the calibration batch plus the
    /// input-gradient pass needed for gradient scales.
    pub calibration: f64,
    /// Per-batch fixed overhead.
    pub overhead: f64,
}

impl TimeBreakdown {
    pub fn total(&self) -> f64 {
        self.training + self.calibration + self.overhead
    }
}

/// Per-batch MACs weighted by precision: frozen work costs
/// `quant_cost_factor` per MAC.
fn weighted_macs(macs: &[BlockMacs], types: &[BlockType], quant_factor: f64) -> f64 {
    macs.iter()
        .zip(types)
        .map(|(m, t)| match t {
            BlockType::FrozenBefore => m.forward as f64 * quant_factor,
            BlockType::FirstTrained => (m.forward + m.backward_param) as f64,
            BlockType::SubsequentTrained => (m.forward + m.backward_param + m.backward_input) as f64,
            BlockType::FrozenAfter => (m.forward + m.backward_input) as f64 * quant_factor,
        })
        .sum()
}

pub fn estimate_time_breakdown(
    profile: &DeviceProfile,
    topology: &ModelTopology,
    config: &Configuration,
    hyper: &CostHyper,
) -> Result<TimeBreakdown> {
    let types = classify_blocks(config, topology.n_blocks())?;
    let per_batch = weighted_macs(&block_mac_counts(topology, hyper.batch_size)?, &types, profile.quant_cost_factor);
    let cal_macs = block_mac_counts(topology, hyper.calibration_batch_size)?;
    let cal_forward: u64 = cal_macs.iter().map(|m| m.forward).sum();
    let cal_backward: u64 = match config.first() {
        Some(l) => cal_macs[l + 1..].iter().map(|m| m.backward_input).sum(),
        None => 0,
    };
    let steps = hyper.batches_per_round as f64;
    Ok(TimeBreakdown {
        training: steps * per_batch / profile.float_mac_rate,
        calibration: (cal_forward + cal_backward) as f64 / profile.float_mac_rate,
        overhead: steps * profile.overhead_per_batch,
    })
}

/// `t_c(A)` in seconds.
pub fn estimate_time(
    profile: &DeviceProfile,
    topology: &ModelTopology,
    config: &Configuration,
    hyper: &CostHyper,
) -> Result<f64> {
    Ok(estimate_time_breakdown(profile, topology, config, hyper)?.total())
}

/// Stored scalars of one block, batch-norm running statistics included.
pub fn block_param_count(spec: &BlockSpec) -> u64 {
    match spec {
        BlockSpec::Input(c) | BlockSpec::Standard(c) => {
            let conv = c.kernel_size * c.kernel_size * c.in_channels * c.out_channels + c.out_channels;
            let bn = if c.has_bn { 4 * c.out_channels } else { 0 };
            (conv + bn) as u64
        }
        BlockSpec::Output(o) => (o.in_features * o.num_classes + o.num_classes) as u64,
    }
}

/// `s(A)`: bytes uploaded for the trained blocks.
pub fn update_size(topology: &ModelTopology, config: &Configuration) -> Result<u64> {
    config.validate(topology.n_blocks())?;
    Ok(config.blocks().map(|i| block_param_count(&topology.blocks[i]) * BYTES_PER_PARAM).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEntry {
    pub config: Configuration,
    pub time_seconds: f64,
    pub size_bytes: u64,
}

/// `t_c` and `s` over every contiguous configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub entries: Vec<CostEntry>,
}

impl CostTable {
    pub fn get(&self, config: &Configuration) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.config == *config)
    }

    /// CSV with header `l,u,time_seconds,size_bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l,u,time_seconds,size_bytes\n");
        for e in &self.entries {
            let (l, u) = e.config.bounds().expect("tables hold non-empty configurations");
            out.push_str(&format!("{l},{u},{},{}\n", e.time_seconds, e.size_bytes));
        }
        out
    }
}

pub fn build_cost_table(profile: &DeviceProfile, topology: &ModelTopology, hyper: &CostHyper) -> Result<CostTable> {
    profile.validate()?;
    let entries = enumerate_contiguous(topology.n_blocks())?
        .into_iter()
        .map(|config| {
            Ok(CostEntry {
                time_seconds: estimate_time(profile, topology, &config, hyper)?,
                size_bytes: update_size(topology, &config)?,
                config,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CostTable { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvSpec, OutputSpec};

    fn conv(k: usize, cin: usize, cout: usize, stride: usize, padding: usize) -> ConvSpec {
        ConvSpec { kernel_size: k, in_channels: cin, out_channels: cout, stride, padding, has_bn: true, has_relu: true }
    }

    fn topology() -> ModelTopology {
        ModelTopology {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            blocks: vec![
                BlockSpec::Input(conv(3, 1, 4, 1, 1)),
                BlockSpec::Standard(conv(3, 4, 8, 1, 1)),
                BlockSpec::Standard(conv(4, 8, 8, 2, 1)),
                BlockSpec::Output(OutputSpec { in_features: 8, num_classes: 10 }),
            ],
        }
    }

    fn profile(rate: f64, q: f64) -> DeviceProfile {
        DeviceProfile { name: "dev".into(), float_mac_rate: rate, quant_cost_factor: q, overhead_per_batch: 0.01 }
    }

    const HYPER: CostHyper = CostHyper { batch_size: 4, batches_per_round: 3, calibration_batch_size: 8 };

    #[test]
    fn conv_forward_macs() {
        let macs = block_mac_counts(&topology(), 1).unwrap();
        // 3x3 conv 4 -> 8 on an 8x8 output, plus one MAC per element for BN and ReLU.
        assert_eq!(macs[1].forward, 18432 + 2 * 512);
        let one = ModelTopology {
            input_channels: 2,
            input_height: 4,
            input_width: 4,
            blocks: vec![
                BlockSpec::Input(ConvSpec { has_bn: false, has_relu: false, ..conv(1, 2, 2, 1, 0) }),
                BlockSpec::Output(OutputSpec { in_features: 2, num_classes: 2 }),
            ],
        };
        assert_eq!(block_mac_counts(&one, 1).unwrap()[0].forward, 64);
    }

    #[test]
    fn update_size_of_standard_block() {
        let t = ModelTopology {
            input_channels: 8,
            input_height: 4,
            input_width: 4,
            blocks: vec![
                BlockSpec::Input(conv(3, 8, 16, 1, 1)),
                BlockSpec::Output(OutputSpec { in_features: 16, num_classes: 2 }),
            ],
        };
        // Brute-force count: every element of every stored tensor.
        let m = crate::nn::ModelParams::<f32>::init(&t, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)).unwrap();
        let enumerated = m.blocks[0].tensors().iter().map(|x| x.len() as u64).sum::<u64>();
        assert_eq!(enumerated, 3 * 3 * 8 * 16 + 16 + 2 * 16 + 2 * 16);
        assert_eq!(update_size(&t, &Configuration::range(0, 0).unwrap()).unwrap(), 4 * enumerated);
        assert_eq!(update_size(&t, &Configuration::range(0, 0).unwrap()).unwrap(), 4928);
        assert_eq!(update_size(&t, &Configuration::empty()).unwrap(), 0);
    }

    #[test]
    fn rate_scales_mac_time_linearly() {
        let t = topology();
        let c = Configuration::range(1, 2).unwrap();
        let slow = estimate_time_breakdown(&profile(1e6, 0.5), &t, &c, &HYPER).unwrap();
        let fast = estimate_time_breakdown(&profile(2e6, 0.5), &t, &c, &HYPER).unwrap();
        assert_eq!(slow.training, 2.0 * fast.training);
        assert_eq!(slow.calibration, 2.0 * fast.calibration);
        assert_eq!(slow.overhead, fast.overhead);
    }

    #[test]
    fn quantization_halves_all_frozen_training_time() {
        let t = topology();
        let c = Configuration::empty();
        let half = estimate_time_breakdown(&profile(1e6, 0.5), &t, &c, &HYPER).unwrap();
        let full = estimate_time_breakdown(&profile(1e6, 1.0), &t, &c, &HYPER).unwrap();
        assert_eq!(full.training, 2.0 * half.training);
    }

    #[test]
    fn table_is_complete_and_device_independent_in_size() {
        let t = topology();
        let a = build_cost_table(&profile(1e6, 0.5), &t, &HYPER).unwrap();
        let b = build_cost_table(&profile(3e7, 0.9), &t, &HYPER).unwrap();
        assert_eq!(a.entries.len(), 10);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.size_bytes, y.size_bytes);
            assert!(x.time_seconds.is_finite() && x.time_seconds > 0.0);
        }
        let full = a.get(&Configuration::full(4)).unwrap().time_seconds;
        assert!(a.entries.iter().all(|e| e.time_seconds <= full));
        let csv = a.to_csv();
        assert!(csv.starts_with("l,u,time_seconds,size_bytes\n"));
        assert_eq!(csv.lines().count(), 11);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(profile(0.0, 0.5).validate().is_err());
        assert!(profile(1.0, 0.0).validate().is_err());
        assert!(profile(1.0, 1.5).validate().is_err());
    }
}
