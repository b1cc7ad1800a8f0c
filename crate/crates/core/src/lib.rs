//! Numerical core for illumination-reflectance-depth (IRD) decoupling and
//! self-supervised monocular depth.
//!
//! Everything here is a pure function over in-memory buffers: the crate is
//! `no_std` and only needs an allocator. File formats, dataset layout and the
//! command-line driver live in the companion `ird` crate.
//!
//! Module map:
//!
//! - [`imaging`]: dense image grids, bilinear sampling, finite differences,
//!   box filters and percentiles.
//! - [`geometry`]: pinhole intrinsics, axis-angle rigid motion and the
//!   target-to-source pixel correspondence used for view synthesis.
//! - [`ird`]: the single-source illumination field and the
//!   `R * L * exp(-beta * D)` image formation model.
//! - [`diff`]: a reverse-mode tape over tensors plus finite-difference audits.
//! - [`losses`]: SSIM, photometric, smoothness, reconstruction, intensity
//!   ratio and degradation consistency losses with per-group routing.
//! - [`predictors`]: direct parameter fields and a tiny convolutional depth
//!   predictor.
//! - [`synth`]: procedural scenes with planted ground truth.
//! - [`optimize`]: Adam, learning-rate schedule and the joint fitting loop.
//! - [`metrics`]: median-aligned depth metrics and error maps.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod diff;
mod error;
pub mod geometry;
pub mod imaging;
pub mod ird;
pub mod losses;
pub mod metrics;
pub mod optimize;
pub mod predictors;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::ImageBuffer;
