//! Feature-structure distillation between small transformer encoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors and a tape-based reverse-mode autodiff.
//! - [`similarity`]: linear HSIC and CKA, full-matrix and per-sample.
//! - [`losses`]: KL/VKD objectives and the intra, local and global structure losses.
//! - [`memory`]: k-means centroid memory for the global structure loss.
//! - [`model`]: a pre-norm transformer encoder with a classifier head.
//! - [`train`]: teacher fine-tuning, Adam, and the distillation loop.
//! - [`analysis`]: relation difference, restoration rate, CKA heatmaps, rank tables.
//! - [`data`], [`checkpoint`], [`config`], [`cli`]: datasets, persistence and the command surface.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod losses;
pub mod memory;
pub mod model;
pub mod similarity;
pub mod train;

pub use error::{FsdError, Result};
pub use numerics::{Graph, Tensor, Var};
