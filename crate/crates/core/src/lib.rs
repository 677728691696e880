//! Post-training quantization of transformer linear layers with
//! timestep-aware activation smoothing and low-rank error compensation.
//!
//! - [`tensor`] dense matrices, per-channel reductions, DITQ tensor files
//! - [`quant`] symmetric int8 / packed int4 per-channel quantization
//! - [`calib`] per-timestep activation statistics
//! - [`smooth`] smoothing factors and folding
//! - [`lowrank`] truncated SVD and binary16 adapters
//! - [`qlayer`] the quantized linear layer, error metrics, footprints
//! - [`sim`] synthetic diffusion-transformer workload and evaluation harness

pub mod calib;
pub mod error;
pub mod lowrank;
pub mod qlayer;
pub mod quant;
pub mod sim;
pub mod smooth;
pub mod tensor;

pub use calib::ActivationStats;
pub use error::{Error, Result};
pub use lowrank::{LowRankAdapter, SvdResult};
pub use qlayer::{ErrorReport, ExecMode, Footprint, QuantLinearLayer};
pub use quant::{BitWidth, QuantizedTensor};
pub use smooth::{SmoothingMode, SmoothingScales};
pub use tensor::{ChannelAxis, HalfMatrix, Matrix};
