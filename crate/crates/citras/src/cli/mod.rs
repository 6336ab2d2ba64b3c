//! Command-line pipelines: config parsing, command execution, and report
//! emission. Reports carry no timestamps, so reruns with the same config
//! and seed produce byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_series, prepare, PreparedData, RoleManifest, SeriesFrame, Window};
use crate::error::{CitrasError, Result};
use crate::inference::{
    attention_export, complexity_probe, evaluate, rolling_forecast, run_ablation, ForecastReport,
};
use crate::model::{CitrasConfig, CitrasModel};
use crate::training::{fit, load_checkpoint, save_checkpoint, TrainConfig, TrainHistory};

fn default_seed() -> u64 {
    2024
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_threads() -> usize {
    1
}
fn default_input_len() -> usize {
    168
}
fn default_horizon() -> usize {
    24
}
fn default_stride() -> usize {
    1
}
fn default_c_values() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_n_values() -> Vec<usize> {
    vec![2, 4, 8]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub split: (usize, usize, usize),
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Horizons evaluated by `evaluate`; defaults to `[horizon]`.
    #[serde(default)]
    pub eval_horizons: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default = "default_c_values")]
    pub c_values: Vec<usize>,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub model: CitrasConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Smoothing factors swept by `train`; the checkpoint keeps the value
    /// with the best validation loss.
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.data.csv.exists() {
            return Err(CitrasError::Config(format!(
                "data.csv {} does not exist",
                self.data.csv.display()
            )));
        }
        if !self.data.manifest.exists() {
            return Err(CitrasError::Config(format!(
                "data.manifest {} does not exist",
                self.data.manifest.display()
            )));
        }
        if self.data.stride == 0 {
            return Err(CitrasError::Config("data.stride must be >= 1".into()));
        }
        if self.data.input_len == 0 || self.data.horizon == 0 {
            return Err(CitrasError::Config(
                "data.input_len and data.horizon must be >= 1".into(),
            ));
        }
        if let Some(h) = &self.data.eval_horizons {
            if h.is_empty() || h.iter().any(|&v| v == 0) {
                return Err(CitrasError::Config(
                    "data.eval_horizons must be non-empty positive integers".into(),
                ));
            }
        }
        if let Some(grid) = &self.alpha_grid {
            if grid.is_empty() || grid.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
                return Err(CitrasError::Config(
                    "alpha_grid entries must lie in (0,1]".into(),
                ));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(CitrasError::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parses a JSON run config, applies defaults, validates all invariants,
/// and propagates the top-level seed into the training section.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CitrasError::Config(format!("{}: {e}", path.display())))?;
    config.train.seed = config.seed;
    config.validate()?;
    Ok(config)
}

// ── Report emission ─────────────────────────────────────────────────────

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| CitrasError::Contract(format!("csv serialization: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| CitrasError::Contract(format!("csv flush: {e}")))?;
    write_atomic(path, &bytes)
}

// ── Pipelines ───────────────────────────────────────────────────────────

fn load_frame(config: &RunConfig) -> Result<SeriesFrame> {
    let manifest = RoleManifest::from_file(&config.data.manifest)?;
    let frame = load_series(&config.data.csv, &manifest)?;
    if !frame.constant_interval() {
        eprintln!(
            "warning: {} is not sampled at a constant interval",
            config.data.csv.display()
        );
    }
    Ok(frame)
}

fn prepare_data(config: &RunConfig) -> Result<(SeriesFrame, PreparedData)> {
    let frame = load_frame(config)?;
    let data = prepare(
        &frame,
        config.data.split,
        config.data.input_len,
        config.data.horizon,
        config.data.stride,
    )?;
    Ok((frame, data))
}

fn out_dir(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
struct SweepEntry {
    alpha: f64,
    best_val_loss: f64,
    epochs_run: usize,
}

#[derive(Debug, Clone, Serialize)]
struct TrainReport {
    history: TrainHistory,
    selected_alpha: f64,
    alpha_sweep: Vec<SweepEntry>,
    config: RunConfig,
}

pub fn run_train(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let (_, data) = prepare_data(config)?;
    let grid = config
        .alpha_grid
        .clone()
        .unwrap_or_else(|| vec![config.model.alpha]);

    let mut sweep = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, CitrasModel, TrainHistory)> = None;
    for alpha in grid {
        let mut model_config = config.model.clone();
        model_config.alpha = alpha;
        let mut model = CitrasModel::new(model_config, config.seed)?;
        let history = fit(&mut model, &data.train, &data.val, &config.train)?;
        let val = history.epochs[history.best_epoch].val_loss;
        sweep.push(SweepEntry {
            alpha,
            best_val_loss: val,
            epochs_run: history.epochs.len(),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, model, history));
        }
    }
    let (_, model, history) = best.expect("at least one alpha trained");

    save_checkpoint(&model, &dir.join("checkpoint.ckpt"))?;
    write_json(
        &dir.join("history.json"),
        &TrainReport {
            history,
            selected_alpha: model.config.alpha,
            alpha_sweep: sweep,
            config: config.clone(),
        },
    )?;
    println!(
        "wrote {} and {}",
        dir.join("checkpoint.ckpt").display(),
        dir.join("history.json").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct EvalReport {
    report: ForecastReport,
    config: RunConfig,
}

pub fn run_evaluate(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let model = load_checkpoint(checkpoint)?;
    let (_, data) = prepare_data(config)?;
    let horizons = config
        .data
        .eval_horizons
        .clone()
        .unwrap_or_else(|| vec![config.data.horizon]);
    let metrics = evaluate(&model, &data.test, &horizons, config.threads)?;
    write_csv_rows(&dir.join("metrics.csv"), &metrics)?;
    write_json(
        &dir.join("metrics.json"),
        &EvalReport {
            report: ForecastReport {
                metrics,
                windows_evaluated: data.test.len(),
                model_config: model.config.clone(),
            },
            config: config.clone(),
        },
    )?;
    println!(
        "wrote {} and {}",
        dir.join("metrics.json").display(),
        dir.join("metrics.csv").display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ForecastRow {
    step: usize,
    variate: String,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ForecastFileReport {
    origin: usize,
    horizon: usize,
    iterations: usize,
    model_config: CitrasConfig,
    config: RunConfig,
}

/// Forecasts from the final test window and writes the predicted values.
pub fn run_forecast(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let model = load_checkpoint(checkpoint)?;
    let (frame, data) = prepare_data(config)?;
    let window: &Window = data.test.last().ok_or_else(|| {
        CitrasError::Contract("the test segment produced no forecastable windows".into())
    })?;
    let forecast = rolling_forecast(&model, window, config.data.horizon)?;
    let names = &frame.manifest().targets;
    let mut rows = Vec::new();
    for (c, col) in forecast.values.iter().enumerate() {
        for (step, &value) in col.iter().enumerate() {
            rows.push(ForecastRow {
                step: step + 1,
                variate: names[c].clone(),
                value,
            });
        }
    }
    write_csv_rows(&dir.join("forecast.csv"), &rows)?;
    write_json(
        &dir.join("forecast.json"),
        &ForecastFileReport {
            origin: window.origin,
            horizon: config.data.horizon,
            iterations: forecast.iterations,
            model_config: model.config.clone(),
            config: config.clone(),
        },
    )?;
    println!("wrote {}", dir.join("forecast.csv").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct AblationReport {
    results: Vec<crate::inference::AblationResult>,
    config: RunConfig,
}

pub fn run_ablate(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let (_, data) = prepare_data(config)?;
    let results = run_ablation(
        &data,
        &config.model,
        &config.train,
        config.data.horizon,
        config.threads,
    )?;
    #[derive(Serialize)]
    struct MetricRow<'a> {
        variant: &'a str,
        mse: f64,
        mae: f64,
    }
    let rows: Vec<MetricRow> = results
        .iter()
        .map(|r| MetricRow {
            variant: &r.variant,
            mse: r.mse,
            mae: r.mae,
        })
        .collect();
    write_csv_rows(&dir.join("ablation.csv"), &rows)?;
    write_json(
        &dir.join("ablation.json"),
        &AblationReport {
            results,
            config: config.clone(),
        },
    )?;
    println!("wrote {}", dir.join("ablation.json").display());
    Ok(())
}

pub fn run_inspect_attention(
    config: &RunConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let dir = out_dir(config, out)?;
    let model = load_checkpoint(checkpoint)?;
    let (_, data) = prepare_data(config)?;
    let window = data.test.first().ok_or_else(|| {
        CitrasError::Contract("the test segment produced no windows to inspect".into())
    })?;
    let (_, rows) = attention_export(&model, window)?;
    write_csv_rows(&dir.join("attention.csv"), &rows)?;
    println!(
        "wrote {} ({} rows)",
        dir.join("attention.csv").display(),
        rows.len()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ProbeReport {
    rows: Vec<crate::inference::ProbeRow>,
    config: RunConfig,
}

pub fn run_probe_complexity(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out_dir(config, out)?;
    let template = CitrasConfig {
        // Kernel counts do not depend on training-scale dimensions; probe
        // with a small model shaped by the configured patch length.
        layers: config.model.layers,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        patch_len: 4,
        ..config.model.clone()
    };
    let rows = complexity_probe(&template, &config.probe.c_values, &config.probe.n_values)?;
    write_csv_rows(&dir.join("complexity.csv"), &rows)?;
    write_json(
        &dir.join("complexity.json"),
        &ProbeReport {
            rows,
            config: config.clone(),
        },
    )?;
    println!("wrote {}", dir.join("complexity.csv").display());
    Ok(())
}
