//! Recursive rolling forecasting and evaluation.

mod ablation;
mod complexity;
mod export;

pub use ablation::{run_ablation, AblationResult};
pub use complexity::{complexity_probe, expected_macs, ProbeRow};
pub use export::{attention_export, trace_rows, TraceRow};

use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{CitrasError, Result};
use crate::model::{CitrasConfig, CitrasModel};
use crate::numerics::Graph;

/// One rolling forecast: raw-unit predictions per target variate, truncated
/// to the requested horizon, plus the number of forward passes it took.
#[derive(Debug, Clone)]
pub struct RollingForecast {
    /// `[C_tgt][S]`
    pub values: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Forecasts `horizon` steps ahead by iterating single-patch predictions:
/// each iteration appends the last predicted patch (in raw units) to the
/// target lookback and slides the window by one patch. Observed covariates
/// cannot be extended into the future, so they restrict recursion to a
/// single patch; known covariates must cover every iteration's extent.
pub fn rolling_forecast(
    model: &CitrasModel,
    window: &Window,
    horizon: usize,
) -> Result<RollingForecast> {
    let p = model.config.patch_len;
    let t = window.lookback_len();
    if horizon == 0 {
        return Err(CitrasError::Contract("horizon must be >= 1".into()));
    }
    let iterations = horizon.div_ceil(p);
    if window.c_obs() > 0 && horizon > p {
        return Err(CitrasError::UnsupportedRecursion { horizon, patch: p });
    }
    if window.c_knw() > 0 {
        let have = window.known_extended[0].len();
        let need = t + iterations * p;
        if have < need {
            return Err(CitrasError::Alignment(format!(
                "known covariates cover {have} rows but recursion to horizon {horizon} needs {need}"
            )));
        }
    }

    let c_tgt = window.c_tgt();
    let mut current = window.lookback_target.clone();
    let mut outputs: Vec<Vec<f64>> = vec![Vec::with_capacity(iterations * p); c_tgt];
    for k in 0..iterations {
        let known: Vec<Vec<f64>> = window
            .known_extended
            .iter()
            .map(|col| col[k * p..k * p + t + p].to_vec())
            .collect();
        let horizon_stub = vec![vec![0.0; p]; c_tgt];
        let sub = Window::new(
            current.clone(),
            window.lookback_observed.clone(),
            known,
            horizon_stub,
            window.origin + k * p,
        )?;
        let mut g = Graph::new();
        let fwd = model.forward_raw(&mut g, &sub)?;
        for (c, &pred) in fwd.predictions.iter().enumerate() {
            let next_patch = g.value(pred).row(t / p - 1).to_vec();
            outputs[c].extend_from_slice(&next_patch);
            current[c].drain(..p);
            current[c].extend_from_slice(&next_patch);
        }
    }
    for col in &mut outputs {
        col.truncate(horizon);
    }
    Ok(RollingForecast {
        values: outputs,
        iterations,
    })
}

/// MSE/MAE for one forecasting horizon, averaged over all test windows,
/// variates, and horizon positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub iterations: usize,
}

/// Evaluation summary written by the CLI: per-horizon metrics plus an echo
/// of the model configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastReport {
    pub metrics: Vec<HorizonMetrics>,
    pub windows_evaluated: usize,
    pub model_config: CitrasConfig,
}

/// Runs `f` over `0..n`, optionally across threads; results always come
/// back in index order so downstream reductions are deterministic.
pub(crate) fn map_indexed<R, F>(threads: usize, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (index, slice) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (offset, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(index * chunk + offset));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot is filled"))
        .collect()
}

/// Evaluates rolling forecasts against each window's horizon truth. Metrics
/// are computed directly on the (standardized) series the windows were cut
/// from; window order does not affect the result.
pub fn evaluate(
    model: &CitrasModel,
    windows: &[Window],
    horizons: &[usize],
    threads: usize,
) -> Result<Vec<HorizonMetrics>> {
    if windows.is_empty() {
        return Err(CitrasError::Contract(
            "evaluate requires a non-empty test window set".into(),
        ));
    }
    let c_tgt = windows[0].c_tgt();
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        for w in windows {
            if w.horizon_len() < h {
                return Err(CitrasError::Contract(format!(
                    "window at origin {} provides {} horizon rows, need {h}",
                    w.origin,
                    w.horizon_len()
                )));
            }
        }
        let per_window = map_indexed(threads, windows.len(), |i| {
            let w = &windows[i];
            let forecast = rolling_forecast(model, w, h)?;
            let mut sq = 0.0;
            let mut abs = 0.0;
            for c in 0..c_tgt {
                for j in 0..h {
                    let err = forecast.values[c][j] - w.horizon_target[c][j];
                    sq += err * err;
                    abs += err.abs();
                }
            }
            Ok((sq, abs, forecast.iterations))
        })?;
        let count = (windows.len() * c_tgt * h) as f64;
        let mut total_sq = 0.0;
        let mut total_abs = 0.0;
        let mut iterations = 0;
        for (sq, abs, iters) in per_window {
            total_sq += sq;
            total_abs += abs;
            iterations = iters;
        }
        out.push(HorizonMetrics {
            horizon: h,
            mse: total_sq / count,
            mae: total_abs / count,
            iterations,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(patch: usize) -> CitrasConfig {
        CitrasConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            patch_len: patch,
            alpha: 0.5,
            ..CitrasConfig::default()
        }
    }

    fn random_window(seed: u64, t: usize, s: usize, c_tgt: usize, c_knw: usize) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let col = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        Window::new(
            (0..c_tgt).map(|_| col(&mut rng, t)).collect(),
            vec![],
            (0..c_knw).map(|_| col(&mut rng, t + s)).collect(),
            (0..c_tgt).map(|_| col(&mut rng, s)).collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_patch_horizon_is_one_forward_pass() {
        let model = CitrasModel::new(tiny_config(4), 3).unwrap();
        let window = random_window(5, 16, 4, 1, 1);
        let forecast = rolling_forecast(&model, &window, 4).unwrap();
        assert_eq!(forecast.iterations, 1);
        assert_eq!(forecast.values[0].len(), 4);
    }

    #[test]
    fn two_patch_recursion_equals_manual_chaining() {
        let model = CitrasModel::new(tiny_config(4), 7).unwrap();
        let window = random_window(9, 16, 8, 2, 1);
        let rolled = rolling_forecast(&model, &window, 8).unwrap();
        assert_eq!(rolled.iterations, 2);

        // Manual chain: forecast one patch, splice it into the lookback,
        // slide the known slice, forecast again.
        let first_window = Window::new(
            window.lookback_target.clone(),
            vec![],
            window
                .known_extended
                .iter()
                .map(|c| c[..20].to_vec())
                .collect(),
            vec![vec![0.0; 4]; 2],
            0,
        )
        .unwrap();
        let first = rolling_forecast(&model, &first_window, 4).unwrap();
        let mut next_lookback = Vec::new();
        for c in 0..2 {
            let mut col = window.lookback_target[c][4..].to_vec();
            col.extend_from_slice(&first.values[c]);
            next_lookback.push(col);
        }
        let second_window = Window::new(
            next_lookback,
            vec![],
            window
                .known_extended
                .iter()
                .map(|c| c[4..24].to_vec())
                .collect(),
            vec![vec![0.0; 4]; 2],
            4,
        )
        .unwrap();
        let second = rolling_forecast(&model, &second_window, 4).unwrap();

        for c in 0..2 {
            let manual: Vec<f64> = first.values[c]
                .iter()
                .chain(&second.values[c])
                .copied()
                .collect();
            assert_eq!(rolled.values[c].len(), manual.len());
            for (a, b) in rolled.values[c].iter().zip(&manual) {
                assert_eq!(a.to_bits(), b.to_bits(), "variate {c} diverged");
            }
        }
    }

    #[test]
    fn long_horizon_truncates_generated_patches() {
        // T=672, P=96, S=336 -> 4 iterations, 384 generated, truncated to 336.
        let config = CitrasConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            patch_len: 96,
            ..CitrasConfig::default()
        };
        let model = CitrasModel::new(config, 11).unwrap();
        let window = random_window(13, 672, 336, 1, 0);
        let forecast = rolling_forecast(&model, &window, 336).unwrap();
        assert_eq!(forecast.iterations, 4);
        assert_eq!(forecast.values[0].len(), 336);
    }

    #[test]
    fn observed_covariates_restrict_recursion_to_one_patch() {
        let model = CitrasModel::new(tiny_config(4), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let col = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let window = Window::new(
            vec![col(&mut rng, 16)],
            vec![col(&mut rng, 16)],
            vec![],
            vec![col(&mut rng, 8)],
            0,
        )
        .unwrap();
        assert!(rolling_forecast(&model, &window, 4).is_ok());
        assert!(matches!(
            rolling_forecast(&model, &window, 8),
            Err(CitrasError::UnsupportedRecursion { .. })
        ));
    }

    #[test]
    fn short_known_coverage_is_an_alignment_error() {
        let model = CitrasModel::new(tiny_config(4), 23).unwrap();
        let window = random_window(29, 16, 4, 1, 1);
        // horizon 8 needs known through T + 8; the window only carries T + 4
        assert!(matches!(
            rolling_forecast(&model, &window, 8),
            Err(CitrasError::Alignment(_))
        ));
    }

    #[test]
    fn perfect_forecaster_scores_zero() {
        // evaluate() must yield MSE = MAE = 0 when predictions equal truth;
        // approximate by comparing a forecast against itself.
        let model = CitrasModel::new(tiny_config(4), 31).unwrap();
        let mut window = random_window(37, 16, 4, 1, 0);
        let forecast = rolling_forecast(&model, &window, 4).unwrap();
        window.horizon_target = forecast.values.clone();
        let metrics = evaluate(&model, &[window], &[4], 1).unwrap();
        assert_eq!(metrics[0].mse, 0.0);
        assert_eq!(metrics[0].mae, 0.0);
    }

    #[test]
    fn constant_residual_gives_unit_metrics() {
        let model = CitrasModel::new(tiny_config(4), 41).unwrap();
        let mut window = random_window(43, 16, 4, 1, 0);
        let forecast = rolling_forecast(&model, &window, 4).unwrap();
        window.horizon_target = forecast
            .values
            .iter()
            .map(|col| col.iter().map(|v| v + 1.0).collect())
            .collect();
        let metrics = evaluate(&model, &[window], &[4], 1).unwrap();
        assert!((metrics[0].mse - 1.0).abs() < 1e-12);
        assert!((metrics[0].mae - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_window_order_invariant_and_thread_stable() {
        let model = CitrasModel::new(tiny_config(4), 47).unwrap();
        let windows: Vec<Window> = (0..6).map(|i| random_window(50 + i, 16, 4, 1, 1)).collect();
        let reversed: Vec<Window> = windows.iter().rev().cloned().collect();
        let a = evaluate(&model, &windows, &[4], 1).unwrap();
        let b = evaluate(&model, &reversed, &[4], 1).unwrap();
        assert!((a[0].mse - b[0].mse).abs() < 1e-12);
        let c = evaluate(&model, &windows, &[4], 4).unwrap();
        assert_eq!(a[0].mse.to_bits(), c[0].mse.to_bits());
        assert_eq!(a[0].mae.to_bits(), c[0].mae.to_bits());
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let model = CitrasModel::new(tiny_config(4), 53).unwrap();
        assert!(evaluate(&model, &[], &[4], 1).is_err());
    }
}
