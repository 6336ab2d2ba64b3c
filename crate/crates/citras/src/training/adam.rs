//! Adam optimizer with bias correction.

use crate::error::{CitrasError, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::training::TrainConfig;

/// First/second moment estimates per parameter plus the global step count.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = (0..params.len())
            .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter, consuming the
/// gradients currently accumulated in the store. Parameters are kept on the
/// f32 grid so binary checkpoints reproduce them exactly.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for id in 0..params.len() {
        if !params.touched(id) {
            return Err(CitrasError::Contract(format!(
                "parameter {} has no accumulated gradient",
                params.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for id in 0..params.len() {
        let grad = params.grad(id).clone();
        let mut value = params.value(id).clone();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        value.quantize_f32();
        params.set_value(id, value)?;
    }
    Ok(())
}
