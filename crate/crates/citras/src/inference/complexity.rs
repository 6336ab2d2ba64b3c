//! Instrumented complexity probe for the attention kernels.
//!
//! Counts multiply-accumulates in the score and weight-times-value matmuls
//! of each attention path over a real forward pass. The cross-variate path
//! is linear in both the number of variates and the number of patch steps;
//! the cross-time path is quadratic in the number of patch steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::Window;
use crate::error::Result;
use crate::model::{CitrasConfig, CitrasModel};
use crate::numerics::{Graph, MacCounters};

/// Measured kernel counts for one (variate count, patch count) setting.
/// `c` counts all key variates including the single target.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub c: usize,
    pub n: usize,
    pub cross_variate_macs: u64,
    pub cross_time_macs: u64,
}

fn probe_window(rng: &mut ChaCha8Rng, t: usize, covariates: usize) -> Result<Window> {
    let col = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    Window::new(
        vec![col(rng, t)],
        (0..covariates).map(|_| col(rng, t)).collect(),
        vec![],
        vec![vec![]],
        0,
    )
}

fn measure(config: &CitrasConfig, c_all: usize, n: usize) -> Result<MacCounters> {
    let model = CitrasModel::new(config.clone(), 12345)?;
    let mut rng = ChaCha8Rng::seed_from_u64(777 + (c_all * 1000 + n) as u64);
    let window = probe_window(&mut rng, n * config.patch_len, c_all - 1)?;
    let mut g = Graph::new();
    model.forward_raw(&mut g, &window)?;
    Ok(g.counters())
}

/// Forward passes with one target variate and `c - 1` observed covariates
/// for every requested `(c, n)` pair, reporting the instrumented kernel
/// counts.
pub fn complexity_probe(
    template: &CitrasConfig,
    c_values: &[usize],
    n_values: &[usize],
) -> Result<Vec<ProbeRow>> {
    template.validate()?;
    let mut rows = Vec::with_capacity(c_values.len() * n_values.len());
    for &c in c_values {
        for &n in n_values {
            let counters = measure(template, c.max(1), n.max(1))?;
            rows.push(ProbeRow {
                c: c.max(1),
                n: n.max(1),
                cross_variate_macs: counters.cross_variate,
                cross_time_macs: counters.cross_time,
            });
        }
    }
    Ok(rows)
}

/// Closed-form kernel counts implied by the architecture, used to
/// cross-check the instrumented counters: per layer, the cross-variate path
/// costs `2·N·C_tgt·C_all·D` and the cross-time path `2·Σ_v N_v²·D`.
pub fn expected_macs(config: &CitrasConfig, c_all: usize, n: usize) -> (u64, u64) {
    let d = config.d_model as u64;
    let l = config.layers as u64;
    let (c_all, n) = (c_all as u64, n as u64);
    let cross_variate = l * 2 * n * c_all * d; // C_tgt = 1
    let cross_time = l * 2 * c_all * n * n * d;
    (cross_variate, cross_time)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_config() -> CitrasConfig {
        CitrasConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            patch_len: 4,
            ..CitrasConfig::default()
        }
    }

    fn row_for(rows: &[ProbeRow], c: usize, n: usize) -> &ProbeRow {
        rows.iter().find(|r| r.c == c && r.n == n).unwrap()
    }

    #[test]
    fn counts_match_closed_form_exactly() {
        let config = probe_config();
        let rows = complexity_probe(&config, &[1, 2, 4], &[2, 4, 8]).unwrap();
        for row in &rows {
            let (cv, ct) = expected_macs(&config, row.c, row.n);
            assert_eq!(row.cross_variate_macs, cv, "cross-variate at {:?}", (row.c, row.n));
            assert_eq!(row.cross_time_macs, ct, "cross-time at {:?}", (row.c, row.n));
        }
    }

    #[test]
    fn doubling_variates_doubles_cross_variate_cost() {
        let rows = complexity_probe(&probe_config(), &[1, 2, 4], &[4]).unwrap();
        for (a, b) in [(1, 2), (2, 4)] {
            let ratio = row_for(&rows, b, 4).cross_variate_macs as f64
                / row_for(&rows, a, 4).cross_variate_macs as f64;
            assert!((1.9..=2.1).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn doubling_steps_scales_kernels_linearly_and_quadratically() {
        let rows = complexity_probe(&probe_config(), &[2], &[2, 4, 8]).unwrap();
        for (a, b) in [(2, 4), (4, 8)] {
            let cv = row_for(&rows, 2, b).cross_variate_macs as f64
                / row_for(&rows, 2, a).cross_variate_macs as f64;
            let ct = row_for(&rows, 2, b).cross_time_macs as f64
                / row_for(&rows, 2, a).cross_time_macs as f64;
            assert!((1.9..=2.1).contains(&cv), "cross-variate ratio {cv}");
            assert!((3.8..=4.2).contains(&ct), "cross-time ratio {ct}");
        }
    }

    #[test]
    fn single_variate_equals_self_only_baseline() {
        // c = 1 is the self-only configuration by construction; its
        // cross-variate cost must match the closed form with C_all = 1.
        let config = probe_config();
        let rows = complexity_probe(&config, &[1], &[4]).unwrap();
        let (cv, _) = expected_macs(&config, 1, 4);
        assert_eq!(rows[0].cross_variate_macs, cv);
    }

    #[test]
    fn counts_are_deterministic_functions_of_the_setting() {
        let config = probe_config();
        let a = complexity_probe(&config, &[2], &[4]).unwrap();
        let b = complexity_probe(&config, &[2], &[4]).unwrap();
        assert_eq!(a[0].cross_variate_macs, b[0].cross_variate_macs);
        assert_eq!(a[0].cross_time_macs, b[0].cross_time_macs);
    }
}
