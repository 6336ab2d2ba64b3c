//! Ablation runs: full model vs. no KV Shift vs. no score smoothing.

use serde::Serialize;

use crate::dataset::PreparedData;
use crate::error::Result;
use crate::inference::evaluate;
use crate::model::{CitrasConfig, CitrasModel};
use crate::training::{fit, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub history: TrainHistory,
}

/// Trains and evaluates the full model and the two mechanism ablations with
/// identical data, seed, and every other configuration field.
pub fn run_ablation(
    data: &PreparedData,
    base: &CitrasConfig,
    train_cfg: &TrainConfig,
    horizon: usize,
    threads: usize,
) -> Result<Vec<AblationResult>> {
    let variants: Vec<(&str, CitrasConfig)> = vec![
        ("full", base.clone()),
        ("no_kv_shift", {
            let mut c = base.clone();
            c.use_kv_shift = false;
            c
        }),
        ("no_ass", {
            let mut c = base.clone();
            c.use_ass = false;
            c
        }),
    ];

    let mut results = Vec::with_capacity(variants.len());
    for (label, config) in variants {
        let mut model = CitrasModel::new(config, train_cfg.seed)?;
        let history = fit(&mut model, &data.train, &data.val, train_cfg)?;
        let metrics = evaluate(&model, &data.test, &[horizon], threads)?;
        results.push(AblationResult {
            variant: label.to_string(),
            mse: metrics[0].mse,
            mae: metrics[0].mae,
            history,
        });
    }
    Ok(results)
}
