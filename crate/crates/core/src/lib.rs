//! Federated learning simulator with per-device partial freezing, conv-BN
//! fusion and 8-bit quantized execution of frozen blocks.

pub mod client;
pub mod cost;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod quant;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
