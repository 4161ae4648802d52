//! Binary-weight and binary-activation feedforward networks.
//!
//! Real-valued shadow weights are trained with straight-through gradients,
//! then packed one bit per weight for XNOR/popcount inference.

pub mod binarize;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model_io;
pub mod network;
pub mod packed;
pub mod tensor;
pub mod trainer;

pub use error::{BnnError, Result};
