//! File formats, dataset layout and command implementations on top of
//! `ird-core`.
//!
//! - [`formats`]: binary PPM/PFM, JSON documents, atomic writes.
//! - [`dataset`]: the `scene_k/` directory layout.
//! - [`checkpoint`]: parameter checkpoints.
//! - [`config`]: the JSON run configuration shared by all commands.
//! - [`commands`]: `synth`, `fit`, `eval`, `gradcheck` and `render`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
mod error;
pub mod formats;

pub use error::{CliError, Result, EXIT_CHECK, EXIT_INVALID, EXIT_NUMERICAL};
