//! CITRAS: a covariate-informed, decoder-only patch transformer for time
//! series forecasting.
//!
//! The crate is organized around the forecasting pipeline:
//!
//! - [`numerics`] — dense f64 tensors with reverse-mode automatic
//!   differentiation and a finite-difference gradient checker.
//! - [`dataset`] — CSV ingestion with role manifests (target / observed /
//!   known covariates), chronological splits, and sliding windows.
//! - [`model`] — the network itself: series stationarization, patch
//!   embedding, causal cross-time attention with rotary positions, and
//!   cross-variate attention with Key-Value Shift and attention score
//!   smoothing, followed by a shared next-patch projection.
//! - [`training`] — next-patch squared loss, Adam, early stopping, and
//!   binary checkpoints.
//! - [`inference`] — recursive rolling forecasts, MSE/MAE evaluation,
//!   attention-trace export, ablation runs, and complexity probes.
//! - [`cli`] — the `citras` command-line surface.
//!
//! Everything is deterministic given a seed: reductions use a fixed
//! summation order and the default configuration is single-threaded.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{CitrasError, Result};
