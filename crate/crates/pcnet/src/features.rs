//! Per-satellite feature extraction, position-correction labels, z-score
//! scaling, and the Kendall-tau feature-correlation diagnostic.

use thiserror::Error;

use crate::geodesy::{ecef_to_geodetic, geodetic_to_ecef, EcefPosition, GeodeticPosition};
use crate::model::{correct_pseudorange, elevation_azimuth, Epoch};
use crate::solver::{los_vector, PositionFix};

pub const FEATURE_DIM: usize = 7;
/// Labels with any component beyond this are treated as ground-truth
/// misalignment and excluded from training.
pub const LABEL_SANITY_BOUND_M: f64 = 1000.0;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] =
    ["pr_residual", "g_x", "g_y", "g_z", "gdop", "elevation", "cn0"];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("fix did not converge; features undefined")]
    UnconvergedFix,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no usable measurements in epoch")]
    EmptyEpoch,
    #[error("missing ground truth at epoch time {0}")]
    MissingGroundTruth(i64),
    #[error("label component {0} m exceeds sanity bound {LABEL_SANITY_BOUND_M} m")]
    SanityBound(f64),
    #[error("need at least {need} rows, have {have}")]
    TooFewRows { need: usize, have: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

/// One satellite's feature vector: residual, LOS components, GDOP
/// (epoch-constant, replicated per row), elevation, C/N0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    pub pr_residual: f64,
    pub g_x: f64,
    pub g_y: f64,
    pub g_z: f64,
    pub gdop: f64,
    pub elevation: f64,
    pub cn0: f64,
}

impl FeatureRow {
    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        [self.pr_residual, self.g_x, self.g_y, self.g_z, self.gdop, self.elevation, self.cn0]
    }

    pub fn from_array(a: [f64; FEATURE_DIM]) -> Self {
        Self {
            pr_residual: a[0],
            g_x: a[1],
            g_y: a[2],
            g_z: a[3],
            gdop: a[4],
            elevation: a[5],
            cn0: a[6],
        }
    }
}

/// ECEF correction from initial fix to ground truth, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionLabel {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub epoch_time: i64,
    pub rows: Vec<FeatureRow>,
    pub label: Option<CorrectionLabel>,
}

/// Per-feature mean and standard deviation fit on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerStats {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
}

/// Build the M x 7 feature rows for one epoch at the initial fix.
pub fn extract_features(epoch: &Epoch, fix: &PositionFix) -> Result<FeatureSet, FeatureError> {
    if !fix.converged {
        return Err(FeatureError::UnconvergedFix);
    }
    let mut corrected: Vec<_> = epoch
        .measurements
        .iter()
        .filter_map(|m| correct_pseudorange(m).ok())
        .collect();
    if corrected.is_empty() {
        return Err(FeatureError::EmptyEpoch);
    }
    // Elevation falls back to geometry when the dataset does not carry it.
    let rx_geo = ecef_to_geodetic(&fix.position)
        .map_err(|e| FeatureError::DegenerateGeometry(e.to_string()))?;

    let mut rows = Vec::with_capacity(corrected.len());
    for c in corrected.drain(..) {
        let (g_x, g_y, g_z) = los_vector(&c.sat_pos, &fix.position)
            .map_err(|e| FeatureError::DegenerateGeometry(e.to_string()))?;
        let predicted = fix.position.sub(&c.sat_pos).norm() + fix.clock_bias;
        let elevation = match c.elevation {
            Some(e) => e,
            None => {
                elevation_azimuth(&c.sat_pos, &rx_geo)
                    .map_err(|e| FeatureError::DegenerateGeometry(e.to_string()))?
                    .0
            }
        };
        rows.push(FeatureRow {
            pr_residual: c.value - predicted,
            g_x,
            g_y,
            g_z,
            gdop: fix.gdop,
            elevation,
            cn0: c.cn0,
        });
    }
    Ok(FeatureSet { epoch_time: epoch.time_ms, rows, label: None })
}

/// Correction label: ground truth minus initial fix, componentwise in ECEF.
pub fn make_label(fix: &PositionFix, gt: &GeodeticPosition) -> Result<CorrectionLabel, FeatureError> {
    let truth = geodetic_to_ecef(gt);
    let d = truth.sub(&fix.position);
    for c in [d.x, d.y, d.z] {
        if c.abs() > LABEL_SANITY_BOUND_M {
            return Err(FeatureError::SanityBound(c));
        }
    }
    Ok(CorrectionLabel { dx: d.x, dy: d.y, dz: d.z })
}

/// Apply a correction to the initial fix position.
pub fn apply_correction(fix_position: &EcefPosition, c: &CorrectionLabel) -> EcefPosition {
    EcefPosition::new(fix_position.x + c.dx, fix_position.y + c.dy, fix_position.z + c.dz)
}

/// Fit per-column z-score statistics; std is floored at 1e-12 so constant
/// columns scale to zero instead of NaN.
pub fn fit_scaler(rows: &[FeatureRow]) -> Result<ScalerStats, FeatureError> {
    if rows.len() < 2 {
        return Err(FeatureError::TooFewRows { need: 2, have: rows.len() });
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; FEATURE_DIM];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_array()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0; FEATURE_DIM];
    for r in rows {
        for (i, v) in r.as_array().iter().enumerate() {
            var[i] += (v - mean[i]).powi(2);
        }
    }
    let mut std = [0.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        std[i] = (var[i] / n).sqrt().max(1e-12);
    }
    Ok(ScalerStats { mean, std })
}

pub fn apply_scaler(stats: &ScalerStats, row: &FeatureRow) -> FeatureRow {
    let a = row.as_array();
    let mut out = [0.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        out[i] = (a[i] - stats.mean[i]) / stats.std[i];
    }
    FeatureRow::from_array(out)
}

/// Kendall's tau-b (tie-corrected) via Knight's O(n log n) algorithm:
/// sort by the first column, count discordant pairs as merge-sort
/// inversions of the second, and correct both counts for ties.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, FeatureError> {
    if a.len() != b.len() {
        return Err(FeatureError::DegenerateInput("length mismatch".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(FeatureError::TooFewRows { need: 2, have: n });
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(a) || constant(b) {
        return Err(FeatureError::DegenerateInput("constant column".into()));
    }

    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|p, q| p.partial_cmp(q).expect("non-finite feature value"));

    let n0 = n as u64 * (n as u64 - 1) / 2;

    // Tie counts: in a (n1), in b (n2), and joint ties (n3) for the
    // concordant-pair correction.
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    {
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && pairs[j].0 == pairs[i].0 {
                j += 1;
            }
            let t = (j - i) as u64;
            n1 += t * (t - 1) / 2;
            // joint ties within the a-tie block
            let mut block: Vec<f64> = pairs[i..j].iter().map(|p| p.1).collect();
            block.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mut k = 0;
            while k < block.len() {
                let mut l = k + 1;
                while l < block.len() && block[l] == block[k] {
                    l += 1;
                }
                let t = (l - k) as u64;
                n3 += t * (t - 1) / 2;
                k = l;
            }
            i = j;
        }
    }

    // Discordant pairs = inversions of b after the stable sort by a
    // (ties in a contribute neither concordant nor discordant).
    let mut bs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut n2 = 0u64;
    {
        let mut sorted_b = bs.clone();
        sorted_b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && sorted_b[j] == sorted_b[i] {
                j += 1;
            }
            let t = (j - i) as u64;
            n2 += t * (t - 1) / 2;
            i = j;
        }
    }
    let discordant = count_inversions(&mut bs);

    // P - Q = n0 - n1 - n2 + n3 - 2Q
    let pq = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * discordant as i64;
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    if denom == 0.0 {
        return Err(FeatureError::DegenerateInput("all pairs tied".into()));
    }
    Ok(pq as f64 / denom)
}

/// Strict inversions (x_i > x_j for i < j) by merge sort; equal values do
/// not count.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let mut inv = count_inversions(left) + count_inversions(right);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            merged.push(left[i]);
            i += 1;
        } else {
            inv += (left.len() - i) as u64;
            merged.push(right[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    v.copy_from_slice(&merged);
    inv
}

/// |tau| for every unordered feature pair over a row corpus; returns the
/// pair (i, j, tau) with the maximal |tau|. Pairs with degenerate columns
/// are skipped.
pub fn max_abs_tau_pair(rows: &[FeatureRow]) -> Option<(usize, usize, f64)> {
    let cols: Vec<Vec<f64>> = (0..FEATURE_DIM)
        .map(|i| rows.iter().map(|r| r.as_array()[i]).collect())
        .collect();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..FEATURE_DIM {
        for j in (i + 1)..FEATURE_DIM {
            if let Ok(tau) = kendall_tau(&cols[i], &cols[j]) {
                if best.map_or(true, |(_, _, t)| tau.abs() > t.abs()) {
                    best = Some((i, j, tau));
                }
            }
        }
    }
    best
}
