//! Attention blocks: causal cross-time attention with rotary positions, and
//! cross-variate attention with Key-Value Shift and attention score
//! smoothing.

use rand::RngCore;

use crate::error::{CitrasError, Result};
use crate::model::trace::{HeadTrace, LayerTrace, StepTrace};
use crate::model::CitrasConfig;
use crate::numerics::{Graph, KernelScope, NodeId, Tensor};

/// Graph nodes for one attention sub-block's parameters. The cross-variate
/// block leaves the query/key biases unset: its scores are the plain
/// bilinear form (Q·Wq)(K·Wk)ᵀ.
pub struct BlockNodes {
    pub wq: NodeId,
    pub bq: Option<NodeId>,
    pub wk: NodeId,
    pub bk: Option<NodeId>,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub norm1_gamma: NodeId,
    pub norm1_beta: NodeId,
    pub norm2_gamma: NodeId,
    pub norm2_beta: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
}

/// Token embeddings flowing through the layer stack, one `[N_role × D]`
/// matrix per variate. Known covariates carry `(T+S)/P` patch steps, one
/// more horizon's worth than targets and observed covariates.
pub struct TokenGrid {
    pub target: Vec<NodeId>,
    pub observed: Vec<NodeId>,
    pub known: Vec<NodeId>,
}

impl TokenGrid {
    pub fn n_tgt(&self, g: &Graph) -> usize {
        g.value(self.target[0]).rows()
    }

    pub fn n_knw(&self, g: &Graph) -> usize {
        self.known.first().map_or(0, |&k| g.value(k).rows())
    }
}

/// Per-sample dropout source; only consulted when the configured rate is
/// positive (training time).
pub struct DropoutSampler<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

fn maybe_dropout(
    g: &mut Graph,
    x: NodeId,
    dropout: &mut Option<&mut DropoutSampler>,
) -> Result<NodeId> {
    if let Some(d) = dropout {
        if d.rate > 0.0 {
            use rand::Rng;
            let keep = 1.0 - d.rate;
            let numel = g.value(x).numel();
            let mask: Vec<f64> = (0..numel)
                .map(|_| if d.rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            return g.dropout(x, mask);
        }
    }
    Ok(x)
}

fn feed_forward(g: &mut Graph, block: &BlockNodes, x: NodeId) -> Result<NodeId> {
    let hidden = g.linear(x, block.ffn_w1, block.ffn_b1)?;
    let act = g.relu(hidden);
    g.linear(act, block.ffn_w2, block.ffn_b2)
}

/// Post-norm residual tail shared by both blocks:
/// `h1 = LN(x + sub); out = LN(h1 + FFN(h1))`.
fn residual_tail(
    g: &mut Graph,
    block: &BlockNodes,
    x: NodeId,
    sublayer: NodeId,
    eps: f64,
    dropout: &mut Option<&mut DropoutSampler>,
) -> Result<NodeId> {
    let sublayer = maybe_dropout(g, sublayer, dropout)?;
    let sum1 = g.add(x, sublayer)?;
    let h1 = g.layer_norm(sum1, block.norm1_gamma, block.norm1_beta, eps)?;
    let ffn = feed_forward(g, block, h1)?;
    let ffn = maybe_dropout(g, ffn, dropout)?;
    let sum2 = g.add(h1, ffn)?;
    g.layer_norm(sum2, block.norm2_gamma, block.norm2_beta, eps)
}

/// Causal multi-head self-attention over the patch steps of one variate,
/// with rotary position embeddings on queries and keys, followed by the
/// post-norm residual FFN. The same parameters serve every variate of every
/// role.
pub fn cross_time_block(
    g: &mut Graph,
    cfg: &CitrasConfig,
    block: &BlockNodes,
    tokens: NodeId,
    dropout: &mut Option<&mut DropoutSampler>,
) -> Result<NodeId> {
    let n = g.value(tokens).rows();
    let dk = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = match block.bq {
        Some(bq) => g.linear(tokens, block.wq, bq)?,
        None => g.matmul(tokens, block.wq)?,
    };
    let k = match block.bk {
        Some(bk) => g.linear(tokens, block.wk, bk)?,
        None => g.matmul(tokens, block.wk)?,
    };
    let v = g.linear(tokens, block.wv, block.bv)?;

    let causal: Vec<bool> = (0..n * n).map(|idx| idx % n <= idx / n).collect();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let qh = g.rope(qh, cfg.rope_base)?;
        let kh = g.rope(kh, cfg.rope_base)?;
        let kht = g.transpose(kh)?;
        g.set_kernel_scope(KernelScope::CrossTime);
        let scores = g.matmul(qh, kht)?;
        g.set_kernel_scope(KernelScope::None);
        let scaled = g.scale(scores, scale);
        let weights = g.masked_softmax(scaled, Some(causal.clone()))?;
        g.set_kernel_scope(KernelScope::CrossTime);
        let out = g.matmul(weights, vh)?;
        g.set_kernel_scope(KernelScope::None);
        head_outs.push(out);
    }
    let merged = g.concat_cols(&head_outs)?;
    let attn = g.linear(merged, block.wo, block.bo)?;
    residual_tail(g, block, tokens, attn, cfg.eps_norm, dropout)
}

/// Keys and values for cross-variate attention at one patch step
/// (0-indexed). Keys stack every variate's token at `step`; values are
/// identical except that, under KV Shift, known-covariate slots take the
/// token from `step + 1`.
pub fn assemble_kv(
    g: &mut Graph,
    grid: &TokenGrid,
    step: usize,
    use_kv_shift: bool,
) -> Result<(NodeId, NodeId)> {
    let n_tgt = grid.n_tgt(g);
    if step >= n_tgt {
        return Err(CitrasError::Contract(format!(
            "patch step {step} out of range for {n_tgt} target patches"
        )));
    }
    let mut key_rows = Vec::new();
    for &m in grid.target.iter().chain(&grid.observed) {
        key_rows.push(g.slice_rows(m, step, 1)?);
    }
    let shifted = use_kv_shift && !grid.known.is_empty();
    let mut value_rows = if shifted { key_rows.clone() } else { Vec::new() };
    for &m in &grid.known {
        key_rows.push(g.slice_rows(m, step, 1)?);
        if shifted {
            let n_knw = g.value(m).rows();
            if step + 1 >= n_knw {
                return Err(CitrasError::Alignment(format!(
                    "KV shift needs known-covariate patch {} but only {n_knw} are available",
                    step + 2
                )));
            }
            value_rows.push(g.slice_rows(m, step + 1, 1)?);
        }
    }
    let keys = g.concat_rows(&key_rows)?;
    let values = if shifted {
        g.concat_rows(&value_rows)?
    } else {
        keys
    };
    Ok((keys, values))
}

/// Pre-softmax attention scores `(Q·Wq)(K·Wk)ᵀ`, one `[C_tgt × C_all]`
/// matrix per head. No rotary embedding is applied: variates carry no
/// temporal order at a fixed patch step.
pub fn raw_scores(
    g: &mut Graph,
    queries: NodeId,
    keys: NodeId,
    wq: NodeId,
    wk: NodeId,
    heads: usize,
) -> Result<Vec<NodeId>> {
    let d = g.value(wq).rows();
    let dk = d / heads;
    let qp = g.matmul(queries, wq)?;
    let kp = g.matmul(keys, wk)?;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * dk, dk)?;
        let kh = g.slice_cols(kp, h * dk, dk)?;
        let kht = g.transpose(kh)?;
        g.set_kernel_scope(KernelScope::CrossVariate);
        let scores = g.matmul(qh, kht)?;
        g.set_kernel_scope(KernelScope::None);
        per_head.push(scores);
    }
    Ok(per_head)
}

/// Exponential moving average over a sequence of score matrices:
/// `A_1 = Ã_1`, `A_i = alpha·Ã_i + (1-alpha)·A_{i-1}`.
pub fn smooth_scores(raw: &[Tensor], alpha: f64) -> Result<Vec<Tensor>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CitrasError::Contract(format!(
            "smoothing factor must lie in (0, 1], got {alpha}"
        )));
    }
    let mut smoothed: Vec<Tensor> = Vec::with_capacity(raw.len());
    for (i, score) in raw.iter().enumerate() {
        if i > 0 && score.shape() != raw[0].shape() {
            return Err(CitrasError::Dimension {
                op: "smooth_scores",
                lhs: raw[0].shape().to_vec(),
                rhs: score.shape().to_vec(),
            });
        }
        if i == 0 || alpha == 1.0 {
            smoothed.push(score.clone());
        } else {
            let prev = &smoothed[i - 1];
            let data: Vec<f64> = score
                .data()
                .iter()
                .zip(prev.data())
                .map(|(&s, &p)| alpha * s + (1.0 - alpha) * p)
                .collect();
            smoothed.push(Tensor::new(score.shape().to_vec(), data)?);
        }
    }
    Ok(smoothed)
}

/// Cross-variate attention at every patch step: queries come from the
/// target variates only, keys and values from all variates via
/// [`assemble_kv`]. Scores are smoothed across patch steps per head, then
/// scaled by 1/sqrt(d_k) and softmaxed over the key axis. Covariate tokens
/// are never updated by this block.
pub fn cross_variate_block(
    g: &mut Graph,
    cfg: &CitrasConfig,
    block: &BlockNodes,
    grid: &TokenGrid,
    dropout: &mut Option<&mut DropoutSampler>,
) -> Result<(Vec<NodeId>, LayerTrace)> {
    let n = grid.n_tgt(g);
    let c_tgt = grid.target.len();
    let dk = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let smoothing = cfg.use_ass && cfg.alpha < 1.0;

    let mut trace = LayerTrace {
        heads: vec![HeadTrace::default(); cfg.heads],
    };
    let mut prev_scores: Vec<Option<NodeId>> = vec![None; cfg.heads];
    let mut step_outputs = Vec::with_capacity(n);

    for step in 0..n {
        let query_rows: Vec<NodeId> = grid
            .target
            .iter()
            .map(|&m| g.slice_rows(m, step, 1))
            .collect::<Result<_>>()?;
        let queries = g.concat_rows(&query_rows)?;
        let (keys, values) = assemble_kv(g, grid, step, cfg.use_kv_shift)?;
        let scores = raw_scores(g, queries, keys, block.wq, block.wk, cfg.heads)?;
        let vp = g.linear(values, block.wv, block.bv)?;

        let mut head_outs = Vec::with_capacity(cfg.heads);
        for (h, &raw) in scores.iter().enumerate() {
            let smoothed = match prev_scores[h] {
                Some(prev) if smoothing => {
                    let scaled_new = g.scale(raw, cfg.alpha);
                    let carried = g.scale(prev, 1.0 - cfg.alpha);
                    g.add(scaled_new, carried)?
                }
                _ => raw,
            };
            prev_scores[h] = Some(smoothed);
            let logits = g.scale(smoothed, scale);
            let weights = g.masked_softmax(logits, None)?;
            trace.heads[h].steps.push(StepTrace {
                raw: g.value(raw).clone(),
                smoothed: g.value(smoothed).clone(),
                weights: g.value(weights).clone(),
            });
            let vh = g.slice_cols(vp, h * dk, dk)?;
            g.set_kernel_scope(KernelScope::CrossVariate);
            let out = g.matmul(weights, vh)?;
            g.set_kernel_scope(KernelScope::None);
            head_outs.push(out);
        }
        let merged = g.concat_cols(&head_outs)?;
        let attn = g.linear(merged, block.wo, block.bo)?;
        step_outputs.push(residual_tail(g, block, queries, attn, cfg.eps_norm, dropout)?);
    }

    // Regroup per-step rows into per-variate token matrices.
    let mut new_targets = Vec::with_capacity(c_tgt);
    for c in 0..c_tgt {
        let rows: Vec<NodeId> = step_outputs
            .iter()
            .map(|&out| g.slice_rows(out, c, 1))
            .collect::<Result<_>>()?;
        new_targets.push(g.concat_rows(&rows)?);
    }
    Ok((new_targets, trace))
}
