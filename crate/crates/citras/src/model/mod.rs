//! The CITRAS network.
//!
//! Layer structure, per layer: causal cross-time attention applied to every
//! variate with shared parameters, then cross-variate attention where
//! queries come from target variates only. Cross-variate attention carries
//! the two mechanisms this model is about: KV Shift (known-covariate value
//! slots read one patch step ahead) and attention score smoothing (an
//! exponential moving average over the per-step score matrices). A shared
//! linear head projects every target token to the values of the next patch.

mod blocks;
mod stationarize;
mod trace;

pub use blocks::{
    assemble_kv, cross_time_block, cross_variate_block, raw_scores, smooth_scores, BlockNodes,
    DropoutSampler, TokenGrid,
};
pub use stationarize::{stationarize, StationarizationStats};
pub use trace::{AttentionTrace, HeadTrace, LayerTrace, StepTrace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{patchify, Window};
use crate::error::{CitrasError, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

fn default_layers() -> usize {
    1
}
fn default_d_model() -> usize {
    128
}
fn default_heads() -> usize {
    8
}
fn default_d_ff() -> usize {
    0 // resolved to 4 * d_model by ffn_width()
}
fn default_patch_len() -> usize {
    24
}
fn default_alpha() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}
fn default_rope_base() -> f64 {
    10000.0
}
fn default_eps() -> f64 {
    1e-5
}

/// Model hyperparameters. `d_ff = 0` means "4 × d_model".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitrasConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_patch_len")]
    pub patch_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub use_kv_shift: bool,
    #[serde(default = "default_true")]
    pub use_ass: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_eps")]
    pub eps_norm: f64,
    #[serde(default = "default_eps")]
    pub eps_std: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for CitrasConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl CitrasConfig {
    /// Feed-forward width with the 4×D default resolved.
    pub fn ffn_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.patch_len == 0 {
            return Err(CitrasError::Config(
                "layers, d_model, heads, and patch_len must all be >= 1".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(CitrasError::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(CitrasError::Config(format!(
                "head dimension {} must be even for rotary position embedding",
                self.head_dim()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CitrasError::Config("alpha must lie in (0,1]".into()));
        }
        if self.rope_base <= 1.0 {
            return Err(CitrasError::Config("rope_base must exceed 1".into()));
        }
        if self.eps_norm <= 0.0 || self.eps_std <= 0.0 {
            return Err(CitrasError::Config(
                "eps_norm and eps_std must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CitrasError::Config("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Parameter ids for one attention sub-block.
#[derive(Debug, Clone)]
pub struct BlockHandles {
    pub wq: ParamId,
    pub bq: Option<ParamId>,
    pub wk: ParamId,
    pub bk: Option<ParamId>,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerHandles {
    pub time: BlockHandles,
    pub var: BlockHandles,
}

/// Resolved parameter ids for the whole network, in registration order.
#[derive(Debug, Clone)]
pub struct ParamHandles {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<LayerHandles>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 0.02).expect("valid init distribution"),
        }
    }

    fn weight(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| self.normal.sample(&mut self.rng))
            .collect();
        let mut tensor = Tensor::matrix(rows, cols, data)?;
        tensor.quantize_f32();
        store.register(name, tensor)
    }

    fn constant(store: &mut ParamStore, name: &str, len: usize, value: f64) -> Result<ParamId> {
        store.register(name, Tensor::new(vec![len], vec![value; len])?)
    }
}

fn register_block(
    init: &mut Initializer,
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    qk_bias: bool,
) -> Result<BlockHandles> {
    let wq = init.weight(store, &format!("{prefix}.wq"), d, d)?;
    let bq = if qk_bias {
        Some(Initializer::constant(store, &format!("{prefix}.bq"), d, 0.0)?)
    } else {
        None
    };
    let wk = init.weight(store, &format!("{prefix}.wk"), d, d)?;
    let bk = if qk_bias {
        Some(Initializer::constant(store, &format!("{prefix}.bk"), d, 0.0)?)
    } else {
        None
    };
    let wv = init.weight(store, &format!("{prefix}.wv"), d, d)?;
    let bv = Initializer::constant(store, &format!("{prefix}.bv"), d, 0.0)?;
    let wo = init.weight(store, &format!("{prefix}.wo"), d, d)?;
    let bo = Initializer::constant(store, &format!("{prefix}.bo"), d, 0.0)?;
    let norm1_gamma = Initializer::constant(store, &format!("{prefix}.norm1.gamma"), d, 1.0)?;
    let norm1_beta = Initializer::constant(store, &format!("{prefix}.norm1.beta"), d, 0.0)?;
    let norm2_gamma = Initializer::constant(store, &format!("{prefix}.norm2.gamma"), d, 1.0)?;
    let norm2_beta = Initializer::constant(store, &format!("{prefix}.norm2.beta"), d, 0.0)?;
    let ffn_w1 = init.weight(store, &format!("{prefix}.ffn.w1"), d, d_ff)?;
    let ffn_b1 = Initializer::constant(store, &format!("{prefix}.ffn.b1"), d_ff, 0.0)?;
    let ffn_w2 = init.weight(store, &format!("{prefix}.ffn.w2"), d_ff, d)?;
    let ffn_b2 = Initializer::constant(store, &format!("{prefix}.ffn.b2"), d, 0.0)?;
    Ok(BlockHandles {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        norm1_gamma,
        norm1_beta,
        norm2_gamma,
        norm2_beta,
        ffn_w1,
        ffn_b1,
        ffn_w2,
        ffn_b2,
    })
}

/// Registers all parameters for `config` into a fresh store. Weights draw
/// from a zero-mean normal with std 0.02 (rounded to the f32 grid so that
/// 32-bit checkpoints are lossless); biases start at zero, layer-norm gains
/// at one.
pub fn init_params(config: &CitrasConfig, seed: u64) -> Result<(ParamStore, ParamHandles)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let d = config.d_model;
    let d_ff = config.ffn_width();

    let embed_w = init.weight(&mut store, "embed.weight", config.patch_len, d)?;
    let embed_b = Initializer::constant(&mut store, "embed.bias", d, 0.0)?;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        // Cross-time attention uses the conventional in-projection with
        // biases; cross-variate scores are the plain bilinear form without.
        let time = register_block(&mut init, &mut store, &format!("layer{l}.time"), d, d_ff, true)?;
        let var = register_block(&mut init, &mut store, &format!("layer{l}.var"), d, d_ff, false)?;
        layers.push(LayerHandles { time, var });
    }
    let proj_w = init.weight(&mut store, "project.weight", d, config.patch_len)?;
    let proj_b = Initializer::constant(&mut store, "project.bias", config.patch_len, 0.0)?;

    Ok((
        store,
        ParamHandles {
            embed_w,
            embed_b,
            layers,
            proj_w,
            proj_b,
        },
    ))
}

fn leaf_block(g: &mut Graph, store: &ParamStore, h: &BlockHandles) -> BlockNodes {
    BlockNodes {
        wq: g.param(store, h.wq),
        bq: h.bq.map(|id| g.param(store, id)),
        wk: g.param(store, h.wk),
        bk: h.bk.map(|id| g.param(store, id)),
        wv: g.param(store, h.wv),
        bv: g.param(store, h.bv),
        wo: g.param(store, h.wo),
        bo: g.param(store, h.bo),
        norm1_gamma: g.param(store, h.norm1_gamma),
        norm1_beta: g.param(store, h.norm1_beta),
        norm2_gamma: g.param(store, h.norm2_gamma),
        norm2_beta: g.param(store, h.norm2_beta),
        ffn_w1: g.param(store, h.ffn_w1),
        ffn_b1: g.param(store, h.ffn_b1),
        ffn_w2: g.param(store, h.ffn_w2),
        ffn_b2: g.param(store, h.ffn_b2),
    }
}

/// Output of one forward pass: per target variate, an `[N_tgt × P]` node of
/// raw-unit predictions where row `i` estimates patch `i+1`, plus the
/// attention trace.
pub struct ForwardPass {
    pub predictions: Vec<NodeId>,
    pub trace: AttentionTrace,
}

/// Full forward pass over an already-stationarized window. `stats` carries
/// the per-variate lookback statistics used to de-normalize predictions
/// back to raw units after projection.
pub fn forward_with(
    g: &mut Graph,
    store: &ParamStore,
    handles: &ParamHandles,
    config: &CitrasConfig,
    window: &Window,
    stats: &StationarizationStats,
    mut dropout: Option<&mut DropoutSampler>,
) -> Result<ForwardPass> {
    config.validate()?;
    let p = config.patch_len;
    let t = window.lookback_len();
    if t % p != 0 {
        return Err(CitrasError::Divisibility {
            what: "lookback length",
            len: t,
            patch: p,
        });
    }
    let n_tgt = t / p;
    if window.c_knw() > 0 {
        let ext = window.known_extended[0].len();
        if ext % p != 0 {
            return Err(CitrasError::Divisibility {
                what: "known covariate extent",
                len: ext,
                patch: p,
            });
        }
        let n_knw = ext / p;
        let needed = if config.use_kv_shift { n_tgt + 1 } else { n_tgt };
        if n_knw < needed {
            return Err(CitrasError::Alignment(format!(
                "known covariates provide {n_knw} patches but {needed} are required \
                 (the horizon must cover at least one patch when KV shift is active)"
            )));
        }
    }
    if stats.target.len() != window.c_tgt()
        || stats.observed.len() != window.c_obs()
        || stats.known.len() != window.c_knw()
    {
        return Err(CitrasError::Contract(
            "stationarization stats do not match the window's variate counts".into(),
        ));
    }

    let embed_w = g.param(store, handles.embed_w);
    let embed_b = g.param(store, handles.embed_b);
    let embed = |g: &mut Graph, col: &[f64]| -> Result<NodeId> {
        let patches = g.constant(patchify(col, p)?);
        g.linear(patches, embed_w, embed_b)
    };

    let mut grid = TokenGrid {
        target: window
            .lookback_target
            .iter()
            .map(|c| embed(g, c))
            .collect::<Result<_>>()?,
        observed: window
            .lookback_observed
            .iter()
            .map(|c| embed(g, c))
            .collect::<Result<_>>()?,
        known: window
            .known_extended
            .iter()
            .map(|c| embed(g, c))
            .collect::<Result<_>>()?,
    };

    let mut trace = AttentionTrace::default();
    for layer in &handles.layers {
        let time = leaf_block(g, store, &layer.time);
        for tokens in grid
            .target
            .iter_mut()
            .chain(grid.observed.iter_mut())
            .chain(grid.known.iter_mut())
        {
            *tokens = cross_time_block(g, config, &time, *tokens, &mut dropout)?;
        }
        let var = leaf_block(g, store, &layer.var);
        let (new_targets, layer_trace) = cross_variate_block(g, config, &var, &grid, &mut dropout)?;
        grid.target = new_targets;
        trace.layers.push(layer_trace);
    }

    let proj_w = g.param(store, handles.proj_w);
    let proj_b = g.param(store, handles.proj_b);
    let mut predictions = Vec::with_capacity(window.c_tgt());
    for (c, &tokens) in grid.target.iter().enumerate() {
        let normalized = g.linear(tokens, proj_w, proj_b)?;
        let (mean, std) = stats.target[c];
        let scaled = g.scale(normalized, std);
        predictions.push(g.add_scalar(scaled, mean));
    }

    Ok(ForwardPass { predictions, trace })
}

/// Configuration plus parameters: the unit that gets trained, checkpointed,
/// and evaluated.
pub struct CitrasModel {
    pub config: CitrasConfig,
    pub params: ParamStore,
    pub handles: ParamHandles,
}

impl CitrasModel {
    pub fn new(config: CitrasConfig, seed: u64) -> Result<Self> {
        let (params, handles) = init_params(&config, seed)?;
        Ok(Self {
            config,
            params,
            handles,
        })
    }

    /// Forward pass in evaluation mode (no dropout).
    pub fn forward(
        &self,
        g: &mut Graph,
        window: &Window,
        stats: &StationarizationStats,
    ) -> Result<ForwardPass> {
        forward_with(g, &self.params, &self.handles, &self.config, window, stats, None)
    }

    /// Stationarizes a raw window and runs the forward pass on it.
    pub fn forward_raw(&self, g: &mut Graph, window: &Window) -> Result<ForwardPass> {
        let (normalized, stats) = stationarize(window, self.config.eps_std)?;
        self.forward(g, &normalized, &stats)
    }
}
