//! CSV ingestion with role manifests, chronological splits, and windowing.
//!
//! A series is described by a [`RoleManifest`]: one timestamp column, one or
//! more target columns, and optional observed / known covariate columns.
//! Known covariates are the ones whose values extend into the forecasting
//! horizon (calendar flags, day-ahead forecasts).

mod frame;
pub mod synthetic;
mod window;

pub use frame::{
    chronological_split, load_series, split_boundaries, RoleManifest, Scaler, SeriesFrame,
    SplitBoundaries,
};
pub use window::{patchify, window_iter, windows_with_context, Window};

use crate::error::Result;

/// A dataset ready for the training/evaluation pipeline: standardized with
/// training-split statistics, with windows for all three segments.
pub struct PreparedData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub scaler: Scaler,
    pub boundaries: SplitBoundaries,
}

/// Standardizes the frame with per-variate statistics fitted on the training
/// rows, then windows each split. Training windows lie entirely inside the
/// training segment; validation and test windows may reach backwards across
/// the split boundary for lookback context, while their horizons stay inside
/// their own segment.
pub fn prepare(
    frame: &SeriesFrame,
    sizes: (usize, usize, usize),
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<PreparedData> {
    let boundaries = split_boundaries(frame.len(), sizes)?;
    let scaler = Scaler::fit(frame, boundaries.train.clone())?;
    let scaled = scaler.apply(frame)?;

    let train_frame = scaled.slice(boundaries.train.clone())?;
    let train = window_iter(&train_frame, input_len, horizon, stride, false)?;
    let val = windows_with_context(&scaled, boundaries.val.clone(), input_len, horizon, stride)?;
    let test = windows_with_context(&scaled, boundaries.test.clone(), input_len, horizon, stride)?;

    Ok(PreparedData {
        train,
        val,
        test,
        scaler,
        boundaries,
    })
}
