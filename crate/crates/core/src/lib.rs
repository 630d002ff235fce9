//! Quantization-aware coresets and back-propagation-free calibration of
//! quantized classifiers.
//!
//! The crate is `no_std` and only needs an allocator. Everything that touches
//! files, clocks or threads lives in the `qcore-cli` companion crate.
//!
//! Module map:
//!
//! - [`nn`]: small conv1d/dense classification engine with manual backprop.
//! - [`quant`]: per-tensor uniform affine quantization of model parameters.
//! - [`misses`]: quantization-miss counting and miss distributions.
//! - [`coreset`]: distribution-matched coreset sampling, information loss and
//!   streaming coreset updates.
//! - [`bitflip`]: delta recording, bit-flipping network training and
//!   gradient-free calibration.
//! - [`data`]: datasets, synthetic domain-shift pairs and stream splits.
//! - [`harness`]: the end-to-end continual calibration experiment.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bitflip;
pub mod coreset;
pub mod data;
mod error;
pub mod harness;
pub(crate) mod math;
pub mod misses;
pub mod nn;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
