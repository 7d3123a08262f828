//! Feature engineering for the one-step temperature models.
//!
//! Raw measurement records are resampled to a model rate (window averages
//! for temperatures and solar irradiation, energy sums for the control
//! input), then turned into lagged feature rows. Each row splits into the
//! convex group `y` — the inputs the downstream networks must be convex and
//! non-decreasing in — and the remaining group `ytilde`:
//!
//! ```text
//! y      = (δT_amb, ΔT_br_k, ΔT_br_k−1, ΔT_br_k−2, Q_u)          // K, K, K, K, kWh
//! ytilde = (Q_sol_k, Q_sol_k−1, Q_sol_k−2, t_sin, t_cos, δT_l)   // W/m², …, K
//! target = ΔT_br_k+1 = T_br_k+1 − T_br_k                         // K
//! ```
//!
//! Temperatures are carried in °C; every δ/Δ quantity is a difference and
//! hence unit-identical in K. Rows whose lag window crosses a data gap are
//! dropped rather than imputed.

pub mod io;

use chrono::{NaiveDateTime, Timelike};
use thiserror::Error;

pub const RATE_FINE_MIN: u32 = 20;
pub const RATE_COARSE_MIN: u32 = 180;

/// One measurement interval: state at `timestamp`, energy over the step.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub timestamp: NaiveDateTime,
    /// Bedroom temperature, °C.
    pub t_br: f64,
    /// Living-room (neighbour zone) temperature, °C.
    pub t_l: f64,
    /// Ambient temperature, °C.
    pub t_amb: f64,
    /// Global solar irradiation, W/m².
    pub q_sol: f64,
    /// Heating/cooling energy over the step, kWh (≤ 0 when cooling).
    pub q_u: f64,
}

/// Indices into [`FeatureVector::y`].
pub const Y_DT_AMB: usize = 0;
pub const Y_DT_K: usize = 1;
pub const Y_DT_KM1: usize = 2;
pub const Y_DT_KM2: usize = 3;
pub const Y_QU: usize = 4;
/// Indices into [`FeatureVector::ytilde`].
pub const YT_QSOL_K: usize = 0;
pub const YT_QSOL_KM1: usize = 1;
pub const YT_QSOL_KM2: usize = 2;
pub const YT_TSIN: usize = 3;
pub const YT_TCOS: usize = 4;
pub const YT_DT_L: usize = 5;

pub const Y_DIM: usize = 5;
pub const YTILDE_DIM: usize = 6;

/// Model inputs at one step, split into the convex group `y` and the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub y: [f64; Y_DIM],
    pub ytilde: [f64; YTILDE_DIM],
}

impl FeatureVector {
    /// Concatenated `[y, ytilde]` for fully-convex networks.
    pub fn concat(&self) -> [f64; Y_DIM + YTILDE_DIM] {
        let mut out = [0.0; Y_DIM + YTILDE_DIM];
        out[..Y_DIM].copy_from_slice(&self.y);
        out[Y_DIM..].copy_from_slice(&self.ytilde);
        out
    }
}

/// One training row: features at step k, target ΔT_br over the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub timestamp: NaiveDateTime,
    pub features: FeatureVector,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rate_minutes: u32,
    pub rows: Vec<DataRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Calendar month (1–12) of each row, used as cross-validation fold labels.
    pub fn month_labels(&self) -> Vec<u32> {
        use chrono::Datelike;
        self.rows.iter().map(|r| r.timestamp.month()).collect()
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("records not strictly increasing in time at index {index}")]
    Unsorted { index: usize },
    #[error("record {index} out of range: {what}")]
    BadRecord { index: usize, what: String },
    #[error("raw rate {raw_minutes} min coarser than requested {requested_minutes} min")]
    RateTooCoarse { raw_minutes: u32, requested_minutes: u32 },
    #[error("requested rate {requested_minutes} min is not a multiple of the raw rate {raw_minutes} min")]
    RateMismatch { raw_minutes: u32, requested_minutes: u32 },
    #[error("{path}:{line}: {what}")]
    Parse { path: String, line: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time-of-day encoding: `(sin, cos)` of the fractional hour mapped onto a
/// 24 h circle, so midnight is (0, 1) and 06:00 is (1, 0).
pub fn encode_time(t: NaiveDateTime) -> (f64, f64) {
    let h = t.hour() as f64 + t.minute() as f64 / 60.0 + t.second() as f64 / 3600.0;
    let phi = 2.0 * std::f64::consts::PI * h / 24.0;
    (phi.sin(), phi.cos())
}

fn validate_records(records: &[RawRecord]) -> Result<(), FeatureError> {
    for (i, r) in records.iter().enumerate() {
        if i > 0 && records[i - 1].timestamp >= r.timestamp {
            return Err(FeatureError::Unsorted { index: i });
        }
        for (name, v) in [("T_br", r.t_br), ("T_l", r.t_l), ("T_amb", r.t_amb)] {
            if !(-40.0..=60.0).contains(&v) {
                return Err(FeatureError::BadRecord {
                    index: i,
                    what: format!("{name} = {v} outside [-40, 60] °C"),
                });
            }
        }
        if !(r.q_sol >= 0.0) {
            return Err(FeatureError::BadRecord {
                index: i,
                what: format!("Q_sol = {} negative", r.q_sol),
            });
        }
        if !r.q_u.is_finite() {
            return Err(FeatureError::BadRecord { index: i, what: "Q_u not finite".into() });
        }
    }
    Ok(())
}

/// Median spacing of the records in minutes.
fn infer_rate_minutes(records: &[RawRecord]) -> u32 {
    let mut diffs: Vec<i64> = records
        .windows(2)
        .map(|w| (w[1].timestamp - w[0].timestamp).num_minutes())
        .collect();
    if diffs.is_empty() {
        return 0;
    }
    diffs.sort_unstable();
    diffs[diffs.len() / 2].max(1) as u32
}

/// Aggregate records into windows of `rate_minutes` starting at the first
/// timestamp. Temperatures and Q_sol are window means, Q_u is the window
/// energy sum. Windows covered by fewer than half their expected raw points
/// are treated as gaps and omitted, so a timestamp jump in the output marks
/// missing data.
pub fn resample(records: &[RawRecord], rate_minutes: u32) -> Result<Vec<RawRecord>, FeatureError> {
    validate_records(records)?;
    if records.len() < 2 {
        return Ok(records.to_vec());
    }
    let raw = infer_rate_minutes(records);
    if raw > rate_minutes {
        return Err(FeatureError::RateTooCoarse { raw_minutes: raw, requested_minutes: rate_minutes });
    }
    if rate_minutes % raw != 0 {
        return Err(FeatureError::RateMismatch { raw_minutes: raw, requested_minutes: rate_minutes });
    }
    let per_window = (rate_minutes / raw) as usize;
    let t0 = records[0].timestamp;
    let window_of = |t: NaiveDateTime| -> i64 {
        (t - t0).num_minutes().div_euclid(rate_minutes as i64)
    };

    let mut out = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let w = window_of(records[i].timestamp);
        let mut j = i;
        while j < records.len() && window_of(records[j].timestamp) == w {
            j += 1;
        }
        let chunk = &records[i..j];
        if chunk.len() * 2 >= per_window {
            let n = chunk.len() as f64;
            out.push(RawRecord {
                timestamp: t0 + chrono::Duration::minutes(w * rate_minutes as i64),
                t_br: chunk.iter().map(|r| r.t_br).sum::<f64>() / n,
                t_l: chunk.iter().map(|r| r.t_l).sum::<f64>() / n,
                t_amb: chunk.iter().map(|r| r.t_amb).sum::<f64>() / n,
                q_sol: chunk.iter().map(|r| r.q_sol).sum::<f64>() / n,
                q_u: chunk.iter().map(|r| r.q_u).sum::<f64>(),
            });
        }
        i = j;
    }
    Ok(out)
}

/// Build lagged feature rows from records already resampled at
/// `rate_minutes`. A row at step k needs the five consecutive records
/// k−3 … k+1: four temperature points for the three ΔT lags, one more for
/// the target. Windows interrupted by a gap are skipped; an input with no
/// complete window yields an empty dataset.
pub fn build_features(records: &[RawRecord], rate_minutes: u32) -> Result<Dataset, FeatureError> {
    validate_records(records)?;
    let step = chrono::Duration::minutes(rate_minutes as i64);
    let mut rows = Vec::new();
    for k in 3..records.len().saturating_sub(1) {
        let window = &records[k - 3..=k + 1];
        let contiguous =
            window.windows(2).all(|w| w[1].timestamp - w[0].timestamp == step);
        if !contiguous {
            continue;
        }
        let r = &records[k];
        let dt = |a: usize, b: usize| records[a].t_br - records[b].t_br;
        let features = FeatureVector {
            y: [
                r.t_amb - r.t_br,  // δT_amb
                dt(k, k - 1),      // ΔT_br_k
                dt(k - 1, k - 2),  // ΔT_br_k−1
                dt(k - 2, k - 3),  // ΔT_br_k−2
                r.q_u,
            ],
            ytilde: {
                let (t_sin, t_cos) = encode_time(r.timestamp);
                [
                    r.q_sol,
                    records[k - 1].q_sol,
                    records[k - 2].q_sol,
                    t_sin,
                    t_cos,
                    r.t_l - r.t_br, // δT_l
                ]
            },
        };
        rows.push(DataRow { timestamp: r.timestamp, features, target: dt(k + 1, k) });
    }
    Ok(Dataset { rate_minutes, rows })
}
