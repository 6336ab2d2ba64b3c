//! Shared test support: an independent straight-line reimplementation of
//! the forward pass (the oracle for network equivalence checks) and window
//! generators.
//!
//! The reference implementation deliberately avoids the library's graph,
//! blocks, and helpers: everything is explicit loops over `Vec<Vec<f64>>`,
//! reading parameters from the store by name.

#![allow(dead_code)]

use citras::dataset::Window;
use citras::model::CitrasConfig;
use citras::numerics::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

fn as_matrix(store: &ParamStore, name: &str) -> Mat {
    let id = store
        .id(name)
        .unwrap_or_else(|| panic!("parameter {name} missing"));
    let t = store.value(id);
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|r| t.data()[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

fn as_vector(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store
        .id(name)
        .unwrap_or_else(|| panic!("parameter {name} missing"));
    store.value(id).data().to_vec()
}

fn affine(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let cols = w[0].len();
    x.iter()
        .map(|row| {
            (0..cols)
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b[j]);
                    for (k, &v) in row.iter().enumerate() {
                        acc += v * w[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mean) / denom + beta[j])
                .collect()
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

fn rope(row: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = row.len();
    let mut out = vec![0.0; d];
    for j in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        out[2 * j] = row[2 * j] * c - row[2 * j + 1] * s;
        out[2 * j + 1] = row[2 * j] * s + row[2 * j + 1] * c;
    }
    out
}

fn add_rows(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let hidden = affine(x, w1, Some(b1));
    let act: Mat = hidden
        .iter()
        .map(|row| row.iter().map(|v| v.max(0.0)).collect())
        .collect();
    affine(&act, w2, Some(b2))
}

struct BlockParams {
    wq: Mat,
    bq: Option<Vec<f64>>,
    wk: Mat,
    bk: Option<Vec<f64>>,
    wv: Mat,
    bv: Vec<f64>,
    wo: Mat,
    bo: Vec<f64>,
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    w1: Mat,
    b1: Vec<f64>,
    w2: Mat,
    b2: Vec<f64>,
}

fn block_params(store: &ParamStore, prefix: &str, qk_bias: bool) -> BlockParams {
    BlockParams {
        wq: as_matrix(store, &format!("{prefix}.wq")),
        bq: qk_bias.then(|| as_vector(store, &format!("{prefix}.bq"))),
        wk: as_matrix(store, &format!("{prefix}.wk")),
        bk: qk_bias.then(|| as_vector(store, &format!("{prefix}.bk"))),
        wv: as_matrix(store, &format!("{prefix}.wv")),
        bv: as_vector(store, &format!("{prefix}.bv")),
        wo: as_matrix(store, &format!("{prefix}.wo")),
        bo: as_vector(store, &format!("{prefix}.bo")),
        ln1_g: as_vector(store, &format!("{prefix}.norm1.gamma")),
        ln1_b: as_vector(store, &format!("{prefix}.norm1.beta")),
        ln2_g: as_vector(store, &format!("{prefix}.norm2.gamma")),
        ln2_b: as_vector(store, &format!("{prefix}.norm2.beta")),
        w1: as_matrix(store, &format!("{prefix}.ffn.w1")),
        b1: as_vector(store, &format!("{prefix}.ffn.b1")),
        w2: as_matrix(store, &format!("{prefix}.ffn.w2")),
        b2: as_vector(store, &format!("{prefix}.ffn.b2")),
    }
}

fn residual_tail(bp: &BlockParams, input: &Mat, sublayer: &Mat, eps: f64) -> Mat {
    let h1 = layer_norm(&add_rows(input, sublayer), &bp.ln1_g, &bp.ln1_b, eps);
    let f = ffn(&h1, &bp.w1, &bp.b1, &bp.w2, &bp.b2);
    layer_norm(&add_rows(&h1, &f), &bp.ln2_g, &bp.ln2_b, eps)
}

fn causal_self_attention(bp: &BlockParams, config: &CitrasConfig, tokens: &Mat) -> Mat {
    let n = tokens.len();
    let d = config.d_model;
    let heads = config.heads;
    let dk = d / heads;
    let q = affine(tokens, &bp.wq, bp.bq.as_deref());
    let k = affine(tokens, &bp.wk, bp.bk.as_deref());
    let v = affine(tokens, &bp.wv, Some(&bp.bv));

    let mut merged = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let qh: Mat = q
            .iter()
            .enumerate()
            .map(|(i, row)| rope(&row[cols.clone()], i, config.rope_base))
            .collect();
        let kh: Mat = k
            .iter()
            .enumerate()
            .map(|(i, row)| rope(&row[cols.clone()], i, config.rope_base))
            .collect();
        for i in 0..n {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let weights = softmax(&logits);
            for (j, &w) in weights.iter().enumerate() {
                for (c, slot) in cols.clone().enumerate() {
                    merged[i][slot] += w * v[j][h * dk + c];
                }
            }
        }
    }
    let projected = affine(&merged, &bp.wo, Some(&bp.bo));
    residual_tail(bp, tokens, &projected, config.eps_norm)
}

struct Grid {
    target: Vec<Mat>,
    observed: Vec<Mat>,
    known: Vec<Mat>,
}

fn cross_variate(bp: &BlockParams, config: &CitrasConfig, grid: &Grid) -> Vec<Mat> {
    let n = grid.target[0].len();
    let c_tgt = grid.target.len();
    let d = config.d_model;
    let heads = config.heads;
    let dk = d / heads;
    let smoothing = config.use_ass && config.alpha < 1.0;

    let mut prev: Vec<Option<Mat>> = vec![None; heads];
    let mut step_outputs: Vec<Mat> = Vec::with_capacity(n);
    for step in 0..n {
        let queries: Mat = grid.target.iter().map(|m| m[step].clone()).collect();
        let mut keys: Mat = Vec::new();
        let mut values: Mat = Vec::new();
        for m in grid.target.iter().chain(&grid.observed) {
            keys.push(m[step].clone());
            values.push(m[step].clone());
        }
        for m in &grid.known {
            keys.push(m[step].clone());
            values.push(if config.use_kv_shift {
                m[step + 1].clone()
            } else {
                m[step].clone()
            });
        }
        let c_all = keys.len();

        let qp = affine(&queries, &bp.wq, None);
        let kp = affine(&keys, &bp.wk, None);
        let vp = affine(&values, &bp.wv, Some(&bp.bv));

        let mut merged = vec![vec![0.0; d]; c_tgt];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            // raw bilinear scores for this head
            let mut scores = vec![vec![0.0; c_all]; c_tgt];
            for qi in 0..c_tgt {
                for ki in 0..c_all {
                    scores[qi][ki] = qp[qi][cols.clone()]
                        .iter()
                        .zip(&kp[ki][cols.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
            let smoothed = if smoothing {
                match &prev[h] {
                    None => scores.clone(),
                    Some(last) => scores
                        .iter()
                        .zip(last)
                        .map(|(srow, lrow)| {
                            srow.iter()
                                .zip(lrow)
                                .map(|(s, l)| config.alpha * s + (1.0 - config.alpha) * l)
                                .collect()
                        })
                        .collect(),
                }
            } else {
                scores.clone()
            };
            prev[h] = Some(smoothed.clone());
            for qi in 0..c_tgt {
                let logits: Vec<f64> = smoothed[qi]
                    .iter()
                    .map(|s| s / (dk as f64).sqrt())
                    .collect();
                let weights = softmax(&logits);
                for (ki, &w) in weights.iter().enumerate() {
                    for (c, slot) in cols.clone().enumerate() {
                        merged[qi][slot] += w * vp[ki][h * dk + c];
                    }
                }
            }
        }
        let projected = affine(&merged, &bp.wo, Some(&bp.bo));
        step_outputs.push(residual_tail(bp, &queries, &projected, config.eps_norm));
    }

    (0..c_tgt)
        .map(|c| step_outputs.iter().map(|out| out[c].clone()).collect())
        .collect()
}

fn lookback_stats(col: &[f64], t: usize, eps_std: f64) -> (f64, f64) {
    let lb = &col[..t];
    let n = lb.len() as f64;
    let mean = lb.iter().sum::<f64>() / n;
    let var = lb.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(eps_std))
}

/// Straight-line forward pass over a raw window, with its own
/// stationarization: returns `[c_tgt][n][p]` raw-unit predictions.
pub fn reference_forward(
    store: &ParamStore,
    config: &CitrasConfig,
    window: &Window,
) -> Vec<Vec<Vec<f64>>> {
    let p = config.patch_len;
    let t = window.lookback_len();
    let n = t / p;

    let embed_w = as_matrix(store, "embed.weight");
    let embed_b = as_vector(store, "embed.bias");
    let normalize_and_embed = |col: &[f64], mean: f64, std: f64| -> Mat {
        let patches: Mat = col
            .chunks(p)
            .map(|chunk| chunk.iter().map(|v| (v - mean) / std).collect())
            .collect();
        affine(&patches, &embed_w, Some(&embed_b))
    };

    let tgt_stats: Vec<(f64, f64)> = window
        .lookback_target
        .iter()
        .map(|c| lookback_stats(c, t, config.eps_std))
        .collect();
    let mut grid = Grid {
        target: window
            .lookback_target
            .iter()
            .zip(&tgt_stats)
            .map(|(c, &(m, s))| normalize_and_embed(c, m, s))
            .collect(),
        observed: window
            .lookback_observed
            .iter()
            .map(|c| {
                let (m, s) = lookback_stats(c, t, config.eps_std);
                normalize_and_embed(c, m, s)
            })
            .collect(),
        known: window
            .known_extended
            .iter()
            .map(|c| {
                let (m, s) = lookback_stats(c, t, config.eps_std);
                normalize_and_embed(c, m, s)
            })
            .collect(),
    };

    for l in 0..config.layers {
        let time = block_params(store, &format!("layer{l}.time"), true);
        for tokens in grid
            .target
            .iter_mut()
            .chain(grid.observed.iter_mut())
            .chain(grid.known.iter_mut())
        {
            *tokens = causal_self_attention(&time, config, tokens);
        }
        let var = block_params(store, &format!("layer{l}.var"), false);
        grid.target = cross_variate(&var, config, &grid);
    }

    let proj_w = as_matrix(store, "project.weight");
    let proj_b = as_vector(store, "project.bias");
    grid.target
        .iter()
        .enumerate()
        .map(|(c, tokens)| {
            let normalized = affine(tokens, &proj_w, Some(&proj_b));
            let (mean, std) = tgt_stats[c];
            normalized
                .iter()
                .map(|row| row.iter().map(|v| v * std + mean).collect())
                .collect::<Vec<Vec<f64>>>()
        })
        .map(|preds| {
            assert_eq!(preds.len(), n);
            preds
        })
        .collect()
}

// ── Window generators ───────────────────────────────────────────────────

pub fn random_column(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

pub fn random_window(
    rng: &mut ChaCha8Rng,
    t: usize,
    s: usize,
    c_tgt: usize,
    c_obs: usize,
    c_knw: usize,
) -> Window {
    Window::new(
        (0..c_tgt).map(|_| random_column(rng, t)).collect(),
        (0..c_obs).map(|_| random_column(rng, t)).collect(),
        (0..c_knw).map(|_| random_column(rng, t + s)).collect(),
        (0..c_tgt).map(|_| random_column(rng, s)).collect(),
        0,
    )
    .unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
