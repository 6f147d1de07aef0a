//! Binary-weight neural networks analysed through their quasi network:
//! moment propagation, BinaryConnect training, neural tangent kernels and
//! spherical-harmonic spectra.

// NaN-rejecting guards are written as `!(x > 0.0)` throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod error;
pub mod harness;
pub mod network;
pub mod ntk;
pub mod num_core;
pub mod quant;
pub mod quasi;
pub mod spectrum;
pub mod trainer;

pub use error::{Error, Result};
