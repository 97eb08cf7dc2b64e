//! Partial freezing: block roles, conv-BN fusion, per-round calibration and
//! 8-bit execution of frozen blocks.

pub mod block;
pub mod calibrate;
pub mod config;
pub mod fusion;
pub mod partition;
pub mod quantize;

pub use block::{FloatFrozenBlock, QuantizedConvBlock};
pub use calibrate::{calibrate_round, BlockCalibration, CalibrationStats};
pub use config::{classify_blocks, BlockType, Configuration};
pub use fusion::{fuse_conv_bn, BnFold, FusedConv};
pub use partition::{apply_configuration, ApplyOptions, FrozenImpl, PartitionedModel};
pub use quantize::{dequantize, quantize_affine, QuantData, QuantParams, QuantTensor, SCALE_FLOOR};
