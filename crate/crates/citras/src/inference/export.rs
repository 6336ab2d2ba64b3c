//! Attention trace export as plot-ready rows.

use serde::Serialize;

use crate::dataset::Window;
use crate::error::Result;
use crate::model::{AttentionTrace, CitrasModel};
use crate::numerics::Graph;

/// One scalar of the cross-variate attention trace. `raw` and `smoothed`
/// are pre-softmax scores; `weight` is the post-softmax attention weight.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub query_variate: String,
    pub key_variate: String,
    pub raw: f64,
    pub smoothed: f64,
    pub weight: f64,
}

/// Key-axis labels in assembly order: targets, observed, known.
fn key_labels(c_tgt: usize, c_obs: usize, c_knw: usize) -> Vec<String> {
    let mut labels = Vec::with_capacity(c_tgt + c_obs + c_knw);
    labels.extend((0..c_tgt).map(|i| format!("tgt{i}")));
    labels.extend((0..c_obs).map(|i| format!("obs{i}")));
    labels.extend((0..c_knw).map(|i| format!("knw{i}")));
    labels
}

/// Flattens a trace into rows, one per (layer, head, step, query, key).
pub fn trace_rows(
    trace: &AttentionTrace,
    c_tgt: usize,
    c_obs: usize,
    c_knw: usize,
) -> Vec<TraceRow> {
    let keys = key_labels(c_tgt, c_obs, c_knw);
    let mut rows = Vec::new();
    for (layer, lt) in trace.layers.iter().enumerate() {
        for (head, ht) in lt.heads.iter().enumerate() {
            for (step, st) in ht.steps.iter().enumerate() {
                for q in 0..c_tgt {
                    for (k, key) in keys.iter().enumerate() {
                        rows.push(TraceRow {
                            layer,
                            head,
                            step,
                            query_variate: format!("tgt{q}"),
                            key_variate: key.clone(),
                            raw: st.raw.at2(q, k),
                            smoothed: st.smoothed.at2(q, k),
                            weight: st.weights.at2(q, k),
                        });
                    }
                }
            }
        }
    }
    rows
}

/// Runs a forward pass over `window` and returns its cross-variate
/// attention trace together with the flattened rows.
pub fn attention_export(
    model: &CitrasModel,
    window: &Window,
) -> Result<(AttentionTrace, Vec<TraceRow>)> {
    let mut g = Graph::new();
    let fwd = model.forward_raw(&mut g, window)?;
    let rows = trace_rows(&fwd.trace, window.c_tgt(), window.c_obs(), window.c_knw());
    Ok((fwd.trace, rows))
}
