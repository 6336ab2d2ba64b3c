//! Finite-difference gradient oracle.

use crate::error::{CitrasError, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;

/// Compares the analytic gradient of `f` against central finite differences
/// over every scalar parameter entry and returns the maximum relative error
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// `f` must build the scalar objective from the supplied store inside the
/// supplied graph; it is called many times with perturbed parameters and
/// must be deterministic (checked by evaluating it twice).
pub fn grad_check<F>(mut f: F, params: &mut ParamStore, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(CitrasError::Contract(format!(
            "grad_check eps must lie in [1e-6, 1e-4], got {eps}"
        )));
    }

    let eval = |params: &ParamStore, f: &mut F| -> Result<f64> {
        let mut graph = Graph::new();
        let loss = f(&mut graph, params)?;
        let value = graph.value(loss).item();
        if !value.is_finite() {
            return Err(CitrasError::Contract(format!(
                "objective is not finite: {value}"
            )));
        }
        Ok(value)
    };

    let first = eval(params, &mut f)?;
    let second = eval(params, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(CitrasError::Determinism { first, second });
    }

    // Analytic gradients.
    params.zero_grads();
    {
        let mut graph = Graph::new();
        let loss = f(&mut graph, params)?;
        let grads = graph.backward(loss)?;
        graph.accumulate_grads(&grads, params)?;
    }
    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|id| params.grad(id).data().to_vec())
        .collect();
    params.zero_grads();

    let mut max_rel = 0.0f64;
    for id in 0..params.len() {
        for idx in 0..params.value(id).numel() {
            let original = params.value(id).data()[idx];
            params.set_scalar(id, idx, original + eps);
            let plus = eval(params, &mut f)?;
            params.set_scalar(id, idx, original - eps);
            let minus = eval(params, &mut f)?;
            params.set_scalar(id, idx, original);

            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[id][idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
