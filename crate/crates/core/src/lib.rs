//! Multi-step GPS trajectory forecasting with a global time-axis MLP branch,
//! a multi-scale convolutional local branch and cross-attention fusion,
//! wrapped in reversible instance normalization.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, kernels, reverse-mode tape, Adam.
//! - [`ingest`]: GeoLife PLT parsing, resampling, splitting and windowing.
//! - [`model`]: the forecaster, its ablation variants and checkpoints.
//! - [`training`]: Huber objective, epoch loop with early stopping.
//! - [`evaluation`]: metrics, latency timing, baselines and reports.

mod codec;
mod error;
pub mod evaluation;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod training;

pub use codec::sha256_hex;
pub use error::{Error, Result};
