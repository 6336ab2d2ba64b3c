//! Series frames: role-labelled multivariate series with timestamps.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CitrasError, Result};

/// Column role assignment for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleManifest {
    pub timestamp: String,
    pub targets: Vec<String>,
    #[serde(default)]
    pub observed: Vec<String>,
    #[serde(default)]
    pub known: Vec<String>,
}

impl RoleManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: RoleManifest = serde_json::from_str(&text)?;
        manifest.validate_roles()?;
        Ok(manifest)
    }

    pub fn validate_roles(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(CitrasError::Manifest(
                "manifest must name at least one target column".into(),
            ));
        }
        let mut seen = HashSet::new();
        for name in self
            .targets
            .iter()
            .chain(&self.observed)
            .chain(&self.known)
        {
            if !seen.insert(name.as_str()) {
                return Err(CitrasError::Manifest(format!(
                    "column {name} appears in more than one role"
                )));
            }
        }
        if seen.contains(self.timestamp.as_str()) {
            return Err(CitrasError::Manifest(format!(
                "timestamp column {} cannot also carry a variate role",
                self.timestamp
            )));
        }
        Ok(())
    }
}

/// A multivariate series with per-column roles. Columns are stored
/// variate-major; all invariants (equal lengths, strictly increasing
/// timestamps) are established at construction.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    manifest: RoleManifest,
    timestamps: Vec<f64>,
    targets: Vec<Vec<f64>>,
    observed: Vec<Vec<f64>>,
    known: Vec<Vec<f64>>,
    constant_interval: bool,
}

impl SeriesFrame {
    pub fn from_columns(
        manifest: RoleManifest,
        timestamps: Vec<f64>,
        targets: Vec<Vec<f64>>,
        observed: Vec<Vec<f64>>,
        known: Vec<Vec<f64>>,
    ) -> Result<Self> {
        manifest.validate_roles()?;
        let len = timestamps.len();
        if targets.len() != manifest.targets.len()
            || observed.len() != manifest.observed.len()
            || known.len() != manifest.known.len()
        {
            return Err(CitrasError::Manifest(format!(
                "column counts ({}, {}, {}) disagree with manifest ({}, {}, {})",
                targets.len(),
                observed.len(),
                known.len(),
                manifest.targets.len(),
                manifest.observed.len(),
                manifest.known.len()
            )));
        }
        for col in targets.iter().chain(&observed).chain(&known) {
            if col.len() != len {
                return Err(CitrasError::Contract(format!(
                    "column length {} disagrees with timestamp length {len}",
                    col.len()
                )));
            }
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(CitrasError::Contract(format!(
                    "timestamps must be strictly increasing, got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        let constant_interval = has_constant_interval(&timestamps);
        Ok(Self {
            manifest,
            timestamps,
            targets,
            observed,
            known,
            constant_interval,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn manifest(&self) -> &RoleManifest {
        &self.manifest
    }

    pub fn c_tgt(&self) -> usize {
        self.targets.len()
    }

    pub fn c_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn c_knw(&self) -> usize {
        self.known.len()
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn observed(&self) -> &[Vec<f64>] {
        &self.observed
    }

    pub fn known(&self) -> &[Vec<f64>] {
        &self.known
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Whether the sampling interval was constant at ingestion time.
    pub fn constant_interval(&self) -> bool {
        self.constant_interval
    }

    /// Contiguous row range as a new frame.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(CitrasError::Contract(format!(
                "slice {range:?} out of bounds for frame of length {}",
                self.len()
            )));
        }
        let cut = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
            cols.iter().map(|c| c[range.clone()].to_vec()).collect()
        };
        Ok(Self {
            manifest: self.manifest.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            targets: cut(&self.targets),
            observed: cut(&self.observed),
            known: cut(&self.known),
            constant_interval: self.constant_interval,
        })
    }
}

fn has_constant_interval(timestamps: &[f64]) -> bool {
    if timestamps.len() < 3 {
        return true;
    }
    let first = timestamps[1] - timestamps[0];
    timestamps
        .windows(2)
        .all(|w| ((w[1] - w[0]) - first).abs() <= first.abs() * 1e-9)
}

/// Loads a CSV with a header row, parsing every manifest column as reals and
/// ordering rows by timestamp. Missing or unparsable cells are hard errors;
/// no imputation is performed.
pub fn load_series(path: &Path, manifest: &RoleManifest) -> Result<SeriesFrame> {
    manifest.validate_roles()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CitrasError::Ingestion {
            row: 0,
            column: String::new(),
            reason: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CitrasError::Ingestion {
            row: 0,
            column: String::new(),
            reason: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CitrasError::Manifest(format!("column {name} not found in CSV header")))
    };

    let ts_idx = col_index(&manifest.timestamp)?;
    let tgt_idx: Vec<usize> = manifest
        .targets
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let obs_idx: Vec<usize> = manifest
        .observed
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let knw_idx: Vec<usize> = manifest
        .known
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;

    struct Row {
        ts: f64,
        values: Vec<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let all_idx: Vec<usize> = tgt_idx
        .iter()
        .chain(&obs_idx)
        .chain(&knw_idx)
        .copied()
        .collect();
    let all_names: Vec<&String> = manifest
        .targets
        .iter()
        .chain(&manifest.observed)
        .chain(&manifest.known)
        .collect();

    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CitrasError::Ingestion {
            row: row_no + 1,
            column: String::new(),
            reason: e.to_string(),
        })?;
        let raw_ts = record.get(ts_idx).unwrap_or("").trim();
        let ts = parse_timestamp(raw_ts).ok_or_else(|| CitrasError::Ingestion {
            row: row_no + 1,
            column: manifest.timestamp.clone(),
            reason: format!("unparsable timestamp {raw_ts:?}"),
        })?;
        let mut values = Vec::with_capacity(all_idx.len());
        for (&idx, name) in all_idx.iter().zip(&all_names) {
            let cell = record.get(idx).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(CitrasError::Ingestion {
                    row: row_no + 1,
                    column: (*name).clone(),
                    reason: "missing value".into(),
                });
            }
            let value: f64 = cell.parse().map_err(|_| CitrasError::Ingestion {
                row: row_no + 1,
                column: (*name).clone(),
                reason: format!("unparsable cell {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(CitrasError::Ingestion {
                    row: row_no + 1,
                    column: (*name).clone(),
                    reason: format!("non-finite value {cell:?}"),
                });
            }
            values.push(value);
        }
        rows.push(Row { ts, values });
    }

    rows.sort_by(|a, b| a.ts.partial_cmp(&b.ts).expect("finite timestamps"));

    let timestamps: Vec<f64> = rows.iter().map(|r| r.ts).collect();
    let n_tgt = tgt_idx.len();
    let n_obs = obs_idx.len();
    let column = |offset: usize| -> Vec<f64> { rows.iter().map(|r| r.values[offset]).collect() };
    let targets: Vec<Vec<f64>> = (0..n_tgt).map(column).collect();
    let observed: Vec<Vec<f64>> = (0..obs_idx.len()).map(|i| column(n_tgt + i)).collect();
    let known: Vec<Vec<f64>> = (0..knw_idx.len())
        .map(|i| column(n_tgt + n_obs + i))
        .collect();

    SeriesFrame::from_columns(manifest.clone(), timestamps, targets, observed, known)
}

/// Accepts raw reals (e.g. epoch seconds) and common datetime layouts.
fn parse_timestamp(raw: &str) -> Option<f64> {
    if let Ok(v) = raw.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%d",
    ];
    for fmt in FORMATS {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.and_utc().timestamp() as f64);
        }
        if let Ok(d) = chrono::NaiveDate::parse_from_str(raw, fmt) {
            return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp() as f64);
        }
    }
    None
}

/// Row ranges of the three chronological segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBoundaries {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn split_boundaries(len: usize, sizes: (usize, usize, usize)) -> Result<SplitBoundaries> {
    let (a, b, c) = sizes;
    let total = a + b + c;
    if total > len {
        return Err(CitrasError::Split {
            requested: total,
            available: len,
        });
    }
    Ok(SplitBoundaries {
        train: 0..a,
        val: a..a + b,
        test: a + b..total,
    })
}

/// Contiguous, ordered, non-overlapping (train, validation, test) segments.
pub fn chronological_split(
    frame: &SeriesFrame,
    sizes: (usize, usize, usize),
) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    let b = split_boundaries(frame.len(), sizes)?;
    Ok((
        frame.slice(b.train)?,
        frame.slice(b.val)?,
        frame.slice(b.test)?,
    ))
}

/// Per-variate standardization statistics fitted on a row range (the
/// training split), applied to the whole series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scaler {
    pub targets: Vec<(f64, f64)>,
    pub observed: Vec<(f64, f64)>,
    pub known: Vec<(f64, f64)>,
}

impl Scaler {
    pub fn fit(frame: &SeriesFrame, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > frame.len() {
            return Err(CitrasError::Contract(format!(
                "scaler fit range {rows:?} invalid for frame of length {}",
                frame.len()
            )));
        }
        let stats = |col: &Vec<f64>| -> (f64, f64) {
            let slice = &col[rows.clone()];
            let n = slice.len() as f64;
            let mean = slice.iter().sum::<f64>() / n;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt().max(1e-8))
        };
        Ok(Self {
            targets: frame.targets().iter().map(stats).collect(),
            observed: frame.observed().iter().map(stats).collect(),
            known: frame.known().iter().map(stats).collect(),
        })
    }

    pub fn apply(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        let scale = |cols: &[Vec<f64>], stats: &[(f64, f64)]| -> Vec<Vec<f64>> {
            cols.iter()
                .zip(stats)
                .map(|(col, &(mean, std))| col.iter().map(|v| (v - mean) / std).collect())
                .collect()
        };
        SeriesFrame::from_columns(
            frame.manifest().clone(),
            frame.timestamps().to_vec(),
            scale(frame.targets(), &self.targets),
            scale(frame.observed(), &self.observed),
            scale(frame.known(), &self.known),
        )
    }
}
