//! Per-window series stationarization.
//!
//! Each variate is standardized with mean and standard deviation computed
//! over the lookback steps only; horizon target rows never feed the
//! statistics. Known covariates are normalized over their full extended
//! slice using the same lookback-only statistics. Predictions are mapped
//! back to raw units with the stored statistics after projection.

use crate::dataset::Window;
use crate::error::{CitrasError, Result};

/// Lookback mean and eps-floored standard deviation per variate.
#[derive(Debug, Clone)]
pub struct StationarizationStats {
    pub target: Vec<(f64, f64)>,
    pub observed: Vec<(f64, f64)>,
    pub known: Vec<(f64, f64)>,
}

fn lookback_stats(values: &[f64], t: usize, eps_std: f64) -> (f64, f64) {
    let lookback = &values[..t];
    let n = lookback.len() as f64;
    let mut mean = 0.0;
    for &v in lookback {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in lookback {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    (mean, var.sqrt().max(eps_std))
}

/// Returns the normalized window together with the statistics needed to
/// de-normalize predictions. The horizon target rows are copied through
/// untouched; they are only consulted (and normalized on the fly) when the
/// loss compares predictions against ground truth.
pub fn stationarize(window: &Window, eps_std: f64) -> Result<(Window, StationarizationStats)> {
    let t = window.lookback_len();
    if t < 2 {
        return Err(CitrasError::Contract(format!(
            "stationarization requires a lookback of at least 2 steps, got {t}"
        )));
    }
    let normalize = |values: &[f64], mean: f64, std: f64| -> Vec<f64> {
        values.iter().map(|v| (v - mean) / std).collect()
    };

    let mut target_stats = Vec::with_capacity(window.c_tgt());
    let mut lookback_target = Vec::with_capacity(window.c_tgt());
    for col in &window.lookback_target {
        let (mean, std) = lookback_stats(col, t, eps_std);
        lookback_target.push(normalize(col, mean, std));
        target_stats.push((mean, std));
    }

    let mut observed_stats = Vec::with_capacity(window.c_obs());
    let mut lookback_observed = Vec::with_capacity(window.c_obs());
    for col in &window.lookback_observed {
        let (mean, std) = lookback_stats(col, t, eps_std);
        lookback_observed.push(normalize(col, mean, std));
        observed_stats.push((mean, std));
    }

    let mut known_stats = Vec::with_capacity(window.c_knw());
    let mut known_extended = Vec::with_capacity(window.c_knw());
    for col in &window.known_extended {
        let (mean, std) = lookback_stats(col, t, eps_std);
        known_extended.push(normalize(col, mean, std));
        known_stats.push((mean, std));
    }

    let normalized = Window::new(
        lookback_target,
        lookback_observed,
        known_extended,
        window.horizon_target.clone(),
        window.origin,
    )?;
    Ok((
        normalized,
        StationarizationStats {
            target: target_stats,
            observed: observed_stats,
            known: known_stats,
        },
    ))
}
