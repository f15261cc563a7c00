//! Detector-free dense image matching with contrastively trained
//! convolutional descriptors.
//!
//! The crate covers the whole pipeline:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine with exactly the
//!   operators the pipeline needs (convolution, batch norm, bilinear grid
//!   sampling, pairwise dot products, diagonal softmax cross-entropy).
//! - [`geometry`]: homographies, sampling grids, normalized DLT, RANSAC and
//!   the evaluation metrics (corner error, reprojection error, inlier counts).
//! - [`synth`]: synthetic image pairs related by a known homography with
//!   photometric distortions, plus the on-disk dataset format.
//! - [`model`]: the fully convolutional residual descriptor network.
//! - [`matching`]: descriptor sampling, similarity matrices, the symmetric
//!   contrastive loss and inference-time match extraction.
//! - [`train`]: Adam, the training loop and checkpoints.
//! - [`eval`]: per-pair and dataset evaluation with CSV/JSON reports.
//! - [`selftest`]: the built-in property suites.
//! - [`cli`]: the `densematch` command-line front end.

pub mod error;
pub mod geometry;
pub mod matching;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod eval;
pub mod selftest;
pub mod cli;

pub use error::{Error, Result};
