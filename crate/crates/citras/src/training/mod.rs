//! Next-patch-prediction training: squared loss over every (step, variate,
//! position) triple, Adam optimization with early stopping, deterministic
//! seeding, and binary checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, load_checkpoint_with_config, save_checkpoint};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{CitrasError, Result};
use crate::model::{
    forward_with, stationarize, CitrasModel, DropoutSampler, ForwardPass, StationarizationStats,
};
use crate::numerics::{Graph, NodeId, Tensor};

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    32
}
fn default_max_epochs() -> usize {
    10
}
fn default_patience() -> usize {
    3
}
fn default_seed() -> u64 {
    2024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CitrasError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CitrasError::Config("betas must lie in [0,1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(CitrasError::Config("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CitrasError::Config(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if self.patience > self.max_epochs {
            return Err(CitrasError::Config(
                "patience must not exceed max_epochs".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error over all (step, variate, position) triples, in the
/// normalized space: predictions are re-normalized with the window's
/// stationarization stats, and ground truth is taken from the normalized
/// lookback (patches 2..N) plus the first horizon patch normalized on the
/// fly. `window` must be the stationarized window the forward pass saw.
pub fn next_patch_loss(
    g: &mut Graph,
    fwd: &ForwardPass,
    window: &Window,
    stats: &StationarizationStats,
) -> Result<NodeId> {
    let c_tgt = window.c_tgt();
    if fwd.predictions.len() != c_tgt {
        return Err(CitrasError::Contract(format!(
            "{} prediction heads for {} target variates",
            fwd.predictions.len(),
            c_tgt
        )));
    }
    let shape = g.value(fwd.predictions[0]).shape().to_vec();
    let (n, p) = (shape[0], shape[1]);
    if window.lookback_len() != n * p {
        return Err(CitrasError::Contract(format!(
            "predictions cover {n} steps of patch {p} but the lookback has {} rows",
            window.lookback_len()
        )));
    }
    if window.horizon_len() < p {
        return Err(CitrasError::Contract(format!(
            "horizon must provide at least one patch ({p} rows), got {}",
            window.horizon_len()
        )));
    }

    let mut per_variate_sums = Vec::with_capacity(c_tgt);
    for (c, &pred) in fwd.predictions.iter().enumerate() {
        let (mean, std) = stats.target[c];
        // Ground truth for step i is patch i+1: lookback patches for
        // i < N-1, the first horizon patch (normalized here) for i = N-1.
        let mut truth = Vec::with_capacity(n * p);
        truth.extend_from_slice(&window.lookback_target[c][p..]);
        truth.extend(
            window.horizon_target[c][..p]
                .iter()
                .map(|v| (v - mean) / std),
        );
        let truth = g.constant(Tensor::matrix(n, p, truth)?);

        let renorm = g.scale(pred, 1.0 / std);
        let renorm = g.add_scalar(renorm, -mean / std);
        let diff = g.sub(renorm, truth)?;
        let sq = g.mul_elem(diff, diff)?;
        per_variate_sums.push(g.sum(sq));
    }
    let mut total = per_variate_sums[0];
    for &s in &per_variate_sums[1..] {
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, 1.0 / (n * c_tgt * p) as f64))
}

/// Tracks the best validation loss and decides when to stop.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss; returns true when training
    /// should stop (no improvement for `patience` consecutive epochs).
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.patience > 0 && self.stale >= self.patience
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 0-based index into `epochs` of the restored parameters.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

struct Sample {
    window: Window,
    stats: StationarizationStats,
}

fn prepare_samples(model: &CitrasModel, windows: &[Window]) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|w| {
            let (window, stats) = stationarize(w, model.config.eps_std)?;
            Ok(Sample { window, stats })
        })
        .collect()
}

fn sample_loss(
    model: &CitrasModel,
    sample: &Sample,
    dropout: Option<&mut DropoutSampler>,
) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let fwd = forward_with(
        &mut g,
        &model.params,
        &model.handles,
        &model.config,
        &sample.window,
        &sample.stats,
        dropout,
    )?;
    let loss = next_patch_loss(&mut g, &fwd, &sample.window, &sample.stats)?;
    Ok((g, loss))
}

/// Mean next-patch loss over a window set, evaluation mode.
pub fn mean_loss(model: &CitrasModel, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(CitrasError::Contract(
            "mean_loss over an empty window set".into(),
        ));
    }
    let samples = prepare_samples(model, windows)?;
    let mut acc = 0.0;
    for sample in &samples {
        let (g, loss) = sample_loss(model, sample, None)?;
        acc += g.value(loss).item();
    }
    Ok(acc / samples.len() as f64)
}

/// Trains with shuffled mini-batches, epoch-end validation, and early
/// stopping; the parameters achieving the best validation loss are restored
/// into the model before returning.
pub fn fit(
    model: &mut CitrasModel,
    train_windows: &[Window],
    val_windows: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(CitrasError::Contract(
            "fit requires non-empty training and validation window sets".into(),
        ));
    }
    let train = prepare_samples(model, train_windows)?;
    let val = prepare_samples(model, val_windows)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d70b);
    let mut state = AdamState::new(&model.params);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_snapshot = model.params.values_snapshot();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grads();
            for &idx in batch {
                let use_dropout = model.config.dropout > 0.0;
                let mut sampler = DropoutSampler {
                    rate: model.config.dropout,
                    rng: &mut dropout_rng,
                };
                let (mut g, loss) =
                    sample_loss(model, &train[idx], use_dropout.then_some(&mut sampler))?;
                epoch_loss += g.value(loss).item();
                // Gradient of the batch mean: scale each sample's loss.
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                let grads = g.backward(scaled)?;
                g.accumulate_grads(&grads, &mut model.params)?;
            }
            adam_step(&mut model.params, &mut state, cfg)?;
        }
        let train_loss = epoch_loss / train.len() as f64;

        let mut val_loss = 0.0;
        for sample in &val {
            let (g, loss) = sample_loss(model, sample, None)?;
            val_loss += g.value(loss).item();
        }
        val_loss /= val.len() as f64;

        history.epochs.push(EpochRecord {
            train_loss,
            val_loss,
        });
        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved_at(epoch) {
            best_snapshot = model.params.values_snapshot();
        }
        if stop {
            history.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    history.best_epoch = stopper.best_epoch();
    model.params.restore_snapshot(&best_snapshot)?;
    model.params.zero_grads();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CitrasConfig;
    use rand::Rng;

    fn tiny_config() -> CitrasConfig {
        CitrasConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            patch_len: 4,
            alpha: 0.5,
            ..CitrasConfig::default()
        }
    }

    fn random_window(seed: u64, t: usize, s: usize) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let col = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        Window::new(
            vec![col(&mut rng, t)],
            vec![],
            vec![col(&mut rng, t + s)],
            vec![col(&mut rng, s)],
            0,
        )
        .unwrap()
    }

    /// Rebuilds a window whose ground truth equals the model's predictions
    /// shifted by `offset` in normalized space; the loss must then be
    /// exactly offset².
    fn rigged_loss(offset: f64) -> f64 {
        let model = CitrasModel::new(tiny_config(), 31).unwrap();
        let window = random_window(32, 16, 4);
        let (normalized, stats) = stationarize(&window, 1e-5).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &normalized, &stats).unwrap();
        let pred = g.value(fwd.predictions[0]).clone();
        let (mean, std) = stats.target[0];
        let p = 4;
        let mut lb = normalized.lookback_target[0].clone();
        for (i, v) in lb.iter_mut().enumerate().skip(p) {
            *v = (pred.data()[i - p] - mean) / std + offset;
        }
        let mut horizon = normalized.horizon_target[0].clone();
        for (i, v) in horizon.iter_mut().enumerate().take(p) {
            *v = pred.data()[3 * p + i] + offset * std;
        }
        let rigged = Window::new(
            vec![lb],
            vec![],
            normalized.known_extended.clone(),
            vec![horizon],
            0,
        )
        .unwrap();
        let loss = next_patch_loss(&mut g, &fwd, &rigged, &stats).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn exact_predictions_give_zero_loss() {
        assert!(rigged_loss(0.0) < 1e-20);
    }

    #[test]
    fn constant_offset_of_two_gives_loss_four() {
        assert!((rigged_loss(2.0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_triple_loop_oracle() {
        let model = CitrasModel::new(tiny_config(), 35).unwrap();
        let window = random_window(36, 16, 4);
        let (normalized, stats) = stationarize(&window, 1e-5).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &normalized, &stats).unwrap();
        let loss = next_patch_loss(&mut g, &fwd, &normalized, &stats).unwrap();

        // Independent mean-of-squares over (step, variate, position).
        let pred = g.value(fwd.predictions[0]);
        let (mean, std) = stats.target[0];
        let (n, p) = (4, 4);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..p {
                let predicted = (pred.at2(i, j) - mean) / std;
                let truth = if i < n - 1 {
                    normalized.lookback_target[0][(i + 1) * p + j]
                } else {
                    (normalized.horizon_target[0][j] - mean) / std
                };
                acc += (predicted - truth) * (predicted - truth);
            }
        }
        let expect = acc / (n * p) as f64;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn short_horizon_is_a_contract_error() {
        let model = CitrasModel::new(tiny_config(), 37).unwrap();
        let window = Window::new(
            vec![random_window(38, 16, 4).lookback_target[0].clone()],
            vec![],
            vec![],
            vec![vec![0.0, 0.0]],
            0,
        )
        .unwrap();
        let (normalized, stats) = stationarize(&window, 1e-5).unwrap();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &normalized, &stats).unwrap();
        assert!(matches!(
            next_patch_loss(&mut g, &fwd, &normalized, &stats),
            Err(CitrasError::Contract(_))
        ));
    }

    #[test]
    fn one_small_step_decreases_single_window_loss() {
        let mut model = CitrasModel::new(tiny_config(), 39).unwrap();
        let window = random_window(40, 16, 4);
        let before = mean_loss(&model, std::slice::from_ref(&window)).unwrap();

        let samples = prepare_samples(&model, std::slice::from_ref(&window)).unwrap();
        model.params.zero_grads();
        let (g, loss) = sample_loss(&model, &samples[0], None).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_grads(&grads, &mut model.params).unwrap();
        let cfg = TrainConfig {
            lr: 1e-6,
            ..TrainConfig::default()
        };
        let mut state = AdamState::new(&model.params);
        adam_step(&mut model.params, &mut state, &cfg).unwrap();

        let after = mean_loss(&model, std::slice::from_ref(&window)).unwrap();
        assert!(after < before, "loss did not decrease: {before} -> {after}");
    }

    #[test]
    fn early_stopper_follows_patience_semantics() {
        // val losses (1.0, 0.9, 0.95, 0.96, 0.97), patience 3
        // -> stop after the fifth epoch, best = second epoch (index 1).
        let mut stopper = EarlyStopper::new(3);
        let losses = [1.0, 0.9, 0.95, 0.96, 0.97];
        let mut stopped_at = None;
        for (epoch, &l) in losses.iter().enumerate() {
            if stopper.observe(epoch, l) {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(stopper.best_epoch(), 1);
        assert_eq!(stopper.best_loss(), 0.9);
    }

    #[test]
    fn training_learns_a_periodic_identity_task() {
        // Patch i+1 equals patch i: a period-P series. The next-patch task
        // is linearly solvable, so the tiny model should fit it quickly.
        let p = 4;
        let base = [0.9, -0.4, 0.1, -0.8];
        let series: Vec<f64> = (0..26 * p).map(|i| base[i % p]).collect();
        let make_window = |origin: usize| {
            Window::new(
                vec![series[origin..origin + 16].to_vec()],
                vec![],
                vec![],
                vec![series[origin + 16..origin + 20].to_vec()],
                origin,
            )
            .unwrap()
        };
        let train: Vec<Window> = (0..64).map(make_window).collect();
        let val: Vec<Window> = (64..80).map(make_window).collect();
        let mut model = CitrasModel::new(tiny_config(), 41).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 16,
            max_epochs: 10,
            patience: 10,
            seed: 7,
            ..TrainConfig::default()
        };
        let history = fit(&mut model, &train, &val, &cfg).unwrap();
        let last = history.epochs.last().unwrap();
        assert!(
            last.train_loss < 0.01,
            "train loss stuck at {}",
            last.train_loss
        );
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let windows: Vec<Window> = (0..6).map(|i| random_window(50 + i, 16, 4)).collect();
        let run = || {
            let mut model = CitrasModel::new(tiny_config(), 43).unwrap();
            let cfg = TrainConfig {
                lr: 1e-3,
                batch_size: 2,
                max_epochs: 3,
                patience: 3,
                seed: 11,
                ..TrainConfig::default()
            };
            fit(&mut model, &windows[..4], &windows[4..], &cfg).unwrap()
        };
        let a = run();
        let b = run();
        for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
            assert_eq!(ea.val_loss.to_bits(), eb.val_loss.to_bits());
        }
        assert_eq!(a, b);
    }

    #[test]
    fn returned_parameters_achieve_best_validation_loss() {
        let windows: Vec<Window> = (0..8).map(|i| random_window(70 + i, 16, 4)).collect();
        let mut model = CitrasModel::new(tiny_config(), 45).unwrap();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            max_epochs: 6,
            patience: 6,
            seed: 13,
            ..TrainConfig::default()
        };
        let history = fit(&mut model, &windows[..5], &windows[5..], &cfg).unwrap();
        let best = history.epochs[history.best_epoch].val_loss;
        for e in &history.epochs {
            assert!(e.val_loss >= best - 1e-15);
        }
        // Restored parameters reproduce the best validation loss exactly.
        let revalidated = mean_loss(&model, &windows[5..]).unwrap();
        assert_eq!(revalidated.to_bits(), best.to_bits());
    }

    #[test]
    fn empty_window_sets_are_rejected() {
        let mut model = CitrasModel::new(tiny_config(), 47).unwrap();
        let w = vec![random_window(80, 16, 4)];
        let cfg = TrainConfig::default();
        assert!(fit(&mut model, &[], &w, &cfg).is_err());
        assert!(fit(&mut model, &w, &[], &cfg).is_err());
    }
}
