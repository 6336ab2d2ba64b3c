//! Sliding windows and patch matrices.

use std::ops::Range;

use crate::dataset::frame::SeriesFrame;
use crate::error::{CitrasError, Result};
use crate::numerics::Tensor;

/// One training/evaluation sample: lookback slices for every role, the
/// extended known-covariate slice covering lookback plus horizon, and the
/// target horizon. Columns are stored variate-major.
#[derive(Debug, Clone)]
pub struct Window {
    /// `[C_tgt][T]`
    pub lookback_target: Vec<Vec<f64>>,
    /// `[C_obs][T]`
    pub lookback_observed: Vec<Vec<f64>>,
    /// `[C_knw][T+S]`
    pub known_extended: Vec<Vec<f64>>,
    /// `[C_tgt][S]`
    pub horizon_target: Vec<Vec<f64>>,
    /// Index of the first lookback row in the source frame.
    pub origin: usize,
}

impl Window {
    pub fn new(
        lookback_target: Vec<Vec<f64>>,
        lookback_observed: Vec<Vec<f64>>,
        known_extended: Vec<Vec<f64>>,
        horizon_target: Vec<Vec<f64>>,
        origin: usize,
    ) -> Result<Self> {
        if lookback_target.is_empty() {
            return Err(CitrasError::Contract(
                "window requires at least one target variate".into(),
            ));
        }
        let t = lookback_target[0].len();
        let s = horizon_target.first().map_or(0, |h| h.len());
        if horizon_target.len() != lookback_target.len() {
            return Err(CitrasError::Contract(format!(
                "horizon carries {} target variates, lookback {}",
                horizon_target.len(),
                lookback_target.len()
            )));
        }
        for col in &lookback_target {
            if col.len() != t {
                return Err(CitrasError::Contract(
                    "target lookback columns have unequal lengths".into(),
                ));
            }
        }
        for col in &lookback_observed {
            if col.len() != t {
                return Err(CitrasError::Contract(
                    "observed lookback columns must cover exactly T rows".into(),
                ));
            }
        }
        for col in &known_extended {
            if col.len() != t + s {
                return Err(CitrasError::Alignment(format!(
                    "known covariate slice has {} rows, expected T+S = {}",
                    col.len(),
                    t + s
                )));
            }
        }
        for col in &horizon_target {
            if col.len() != s {
                return Err(CitrasError::Contract(
                    "horizon columns have unequal lengths".into(),
                ));
            }
        }
        Ok(Self {
            lookback_target,
            lookback_observed,
            known_extended,
            horizon_target,
            origin,
        })
    }

    pub fn lookback_len(&self) -> usize {
        self.lookback_target[0].len()
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon_target.first().map_or(0, |h| h.len())
    }

    pub fn c_tgt(&self) -> usize {
        self.lookback_target.len()
    }

    pub fn c_obs(&self) -> usize {
        self.lookback_observed.len()
    }

    pub fn c_knw(&self) -> usize {
        self.known_extended.len()
    }
}

fn cut(cols: &[Vec<f64>], range: Range<usize>) -> Vec<Vec<f64>> {
    cols.iter().map(|c| c[range.clone()].to_vec()).collect()
}

fn window_at(frame: &SeriesFrame, origin: usize, t: usize, s: usize) -> Result<Window> {
    Window::new(
        cut(frame.targets(), origin..origin + t),
        cut(frame.observed(), origin..origin + t),
        cut(frame.known(), origin..origin + t + s),
        cut(frame.targets(), origin + t..origin + t + s),
        origin,
    )
}

/// Windows at origins `0, stride, 2·stride, …` while the full extent
/// `origin + T + S` fits in the frame. With `drop_last = false` every valid
/// origin is emitted; with `drop_last = true` the final window is dropped
/// when the frame tail it leaves uncovered is not a whole stride multiple.
pub fn window_iter(
    frame: &SeriesFrame,
    t: usize,
    s: usize,
    stride: usize,
    drop_last: bool,
) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(CitrasError::Contract("stride must be >= 1".into()));
    }
    if t == 0 || t + s > frame.len() {
        return Err(CitrasError::Contract(format!(
            "window extent T+S = {} does not fit frame of length {}",
            t + s,
            frame.len()
        )));
    }
    let span = frame.len() - (t + s);
    let mut count = span / stride + 1;
    if drop_last && span % stride != 0 {
        count = count.saturating_sub(1);
    }
    (0..count)
        .map(|k| window_at(frame, k * stride, t, s))
        .collect()
}

/// Windows whose horizons lie inside `segment` but whose lookbacks may reach
/// backwards across the segment boundary into earlier rows of `frame`.
pub fn windows_with_context(
    frame: &SeriesFrame,
    segment: Range<usize>,
    t: usize,
    s: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(CitrasError::Contract("stride must be >= 1".into()));
    }
    if segment.end > frame.len() {
        return Err(CitrasError::Contract(format!(
            "segment {segment:?} out of bounds for frame of length {}",
            frame.len()
        )));
    }
    let mut windows = Vec::new();
    if segment.is_empty() {
        return Ok(windows);
    }
    // First horizon row starts at the segment boundary when enough history
    // exists; otherwise at the earliest origin with a full lookback.
    let first_horizon = segment.start.max(t);
    let mut horizon_start = first_horizon;
    while horizon_start + s <= segment.end {
        windows.push(window_at(frame, horizon_start - t, t, s)?);
        horizon_start += stride;
    }
    Ok(windows)
}

/// Splits a vector into consecutive non-overlapping patches of length `p`,
/// one patch per row.
pub fn patchify(x: &[f64], p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(CitrasError::Contract("patch length must be >= 1".into()));
    }
    if x.len() % p != 0 {
        return Err(CitrasError::Divisibility {
            what: "series length",
            len: x.len(),
            patch: p,
        });
    }
    Tensor::matrix(x.len() / p, p, x.to_vec())
}
