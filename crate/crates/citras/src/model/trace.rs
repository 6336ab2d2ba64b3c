//! Attention traces captured during the forward pass.

use crate::numerics::Tensor;

/// Scores at one (layer, head, patch step): the raw pre-softmax scores, the
/// smoothed scores after the exponential moving average, and the final
/// post-softmax weights. Each matrix is `[C_tgt × C_all]`.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub raw: Tensor,
    pub smoothed: Tensor,
    pub weights: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct HeadTrace {
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
}

/// Cross-variate attention scores for every layer, head, and patch step of
/// one forward pass. When smoothing is disabled (or alpha is 1) the raw and
/// smoothed matrices are identical.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn num_steps(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.heads.first())
            .map_or(0, |h| h.steps.len())
    }
}
