//! Repeated month-fold cross-validation with multi-step validation error.
//!
//! Calendar months are the fold unit: each repetition shuffles the months,
//! trains a fresh model on the first `train_folds` of them and scores it on
//! the next `val_folds`. The score is a *multi-step* error — the model rolls
//! its own predictions forward over the horizon (three 20-minute steps or
//! two 180-minute steps) and only the final temperature is compared against
//! the measured one, so one-step-ahead shortcuts don't flatter it.
//!
//! Repetitions are independent and run in parallel; every repetition derives
//! its own RNG streams from `(seed, repetition)`, so results don't depend on
//! thread scheduling.

use std::collections::HashSet;

use chrono::{Datelike, Duration};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{train, TrainConfig, TrainError};
use crate::features::{
    build_features, resample, Dataset, RawRecord, RATE_COARSE_MIN, RATE_FINE_MIN, YT_DT_L,
    YT_QSOL_KM1, YT_QSOL_KM2, Y_DT_K, Y_DT_KM1, Y_DT_KM2,
};
use crate::mix_seed;
use crate::model::{ModelFamily, TrainedModel};
use crate::rollout::{predict_trajectory, Disturbance, RolloutHistory, RolloutPlan, Segment};

/// Validation horizon; fixes both the model rate and the number of chained
/// prediction steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Horizon {
    /// Three 20-minute steps.
    OneHour,
    /// Two 180-minute steps.
    SixHours,
}

impl Horizon {
    pub const ALL: [Horizon; 2] = [Horizon::OneHour, Horizon::SixHours];

    pub fn steps(self) -> usize {
        match self {
            Horizon::OneHour => 3,
            Horizon::SixHours => 2,
        }
    }

    pub fn rate_minutes(self) -> u32 {
        match self {
            Horizon::OneHour => RATE_FINE_MIN,
            Horizon::SixHours => RATE_COARSE_MIN,
        }
    }
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Horizon::OneHour => "1h",
            Horizon::SixHours => "6h",
        })
    }
}

impl std::str::FromStr for Horizon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1h" => Ok(Horizon::OneHour),
            "6h" => Ok(Horizon::SixHours),
            other => Err(format!("unknown horizon {other:?}, expected 1h or 6h")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KfoldConfig {
    pub repetitions: usize,
    pub train_folds: usize,
    pub val_folds: usize,
    pub horizon: Horizon,
    pub train: TrainConfig,
}

impl Default for KfoldConfig {
    fn default() -> Self {
        KfoldConfig {
            repetitions: 20,
            train_folds: 9,
            val_folds: 3,
            horizon: Horizon::OneHour,
            train: TrainConfig::default(),
        }
    }
}

/// Per-repetition validation MSEs plus their summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub family: ModelFamily,
    pub horizon: Horizon,
    /// Final-step-temperature MSE of each repetition, in repetition order.
    pub mses: Vec<f64>,
    pub median: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of pre-sorted data (the common "type 7"
/// definition): index `h = (n-1)·q`, interpolated between the two
/// neighbouring order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Run repeated month-fold cross-validation of one model family.
///
/// `records` is the raw measurement log at any rate at least as fine as the
/// horizon's; it is resampled internally. Fold labels are `(year, month)`
/// pairs of the feature-row timestamps.
pub fn kfold_evaluate(
    family: ModelFamily,
    records: &[RawRecord],
    cfg: &KfoldConfig,
) -> Result<FoldReport, TrainError> {
    if cfg.repetitions == 0 {
        return Err(TrainError::NoRepetitions);
    }
    let rate = cfg.horizon.rate_minutes();
    let steps = cfg.horizon.steps();
    let records = resample(records, rate)?;
    let ds = build_features(&records, rate)?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut months: Vec<(i32, u32)> =
        ds.rows.iter().map(|r| (r.timestamp.year(), r.timestamp.month())).collect();
    months.dedup(); // rows are chronological
    let need = cfg.train_folds + cfg.val_folds;
    if months.len() < need {
        return Err(TrainError::TooFewFolds { have: months.len(), need });
    }

    // Row k's timestamp is the timestamp of the record it was built around.
    let rec_index: Vec<usize> = ds
        .rows
        .iter()
        .map(|r| {
            records
                .binary_search_by_key(&r.timestamp, |x| x.timestamp)
                .expect("feature rows carry record timestamps")
        })
        .collect();

    let mses = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(family, &records, &ds, &rec_index, &months, cfg, rate, steps, rep))
        .collect::<Result<Vec<f64>, TrainError>>()?;

    let mut sorted = mses.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(FoldReport {
        family,
        horizon: cfg.horizon,
        median: quantile(&sorted, 0.5),
        iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mses,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_repetition(
    family: ModelFamily,
    records: &[RawRecord],
    ds: &Dataset,
    rec_index: &[usize],
    months: &[(i32, u32)],
    cfg: &KfoldConfig,
    rate: u32,
    steps: usize,
    rep: usize,
) -> Result<f64, TrainError> {
    // Two independent streams per repetition: one for fold choice and
    // initialisation, one consumed inside train() for batch shuffling.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, 2 * rep as u64));
    let train_cfg =
        TrainConfig { seed: mix_seed(cfg.train.seed, 2 * rep as u64 + 1), ..cfg.train.clone() };

    let mut order: Vec<usize> = (0..months.len()).collect();
    order.shuffle(&mut rng);
    let train_months: HashSet<(i32, u32)> =
        order[..cfg.train_folds].iter().map(|&i| months[i]).collect();
    let val_months: HashSet<(i32, u32)> =
        order[cfg.train_folds..cfg.train_folds + cfg.val_folds].iter().map(|&i| months[i]).collect();

    let month_of = |row: &crate::features::DataRow| (row.timestamp.year(), row.timestamp.month());
    let train_rows: Vec<_> =
        ds.rows.iter().filter(|r| train_months.contains(&month_of(r))).cloned().collect();
    let train_ds = Dataset { rate_minutes: rate, rows: train_rows };

    let mut model = TrainedModel::init(family, rate, &mut rng);
    train(&mut model, &train_ds, &train_cfg)?;

    let plan = RolloutPlan::new(vec![Segment { model: &model, steps }])?;
    let step_gap = Duration::minutes(rate as i64);
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for (row_i, row) in ds.rows.iter().enumerate() {
        if !val_months.contains(&month_of(row)) {
            continue;
        }
        let k = rec_index[row_i];
        if k + steps >= records.len() {
            continue;
        }
        // The row guarantees records k-3..=k+1 are contiguous; the rest of
        // the window has to be checked.
        if (1..steps).any(|j| records[k + j + 1].timestamp - records[k + j].timestamp != step_gap)
        {
            continue;
        }
        let history = RolloutHistory {
            t_start: records[k].t_br,
            delta_t_lags: [
                row.features.y[Y_DT_K],
                row.features.y[Y_DT_KM1],
                row.features.y[Y_DT_KM2],
            ],
            q_sol_lags: [row.features.ytilde[YT_QSOL_KM1], row.features.ytilde[YT_QSOL_KM2]],
            delta_t_l: row.features.ytilde[YT_DT_L],
            coarse_delta_t: [0.0; 2],
            coarse_q_sol: [0.0; 2],
        };
        let dist: Vec<Disturbance> = (0..steps)
            .map(|j| Disturbance {
                timestamp: records[k + j].timestamp,
                q_sol: records[k + j].q_sol,
                t_amb: records[k + j].t_amb,
            })
            .collect();
        let u: Vec<f64> = (0..steps).map(|j| records[k + j].q_u).collect();
        let traj = predict_trajectory(&plan, &history, &dist, &u)?;
        let err = traj[steps - 1] - records[k + steps].t_br;
        sq_sum += err * err;
        count += 1;
    }
    if count == 0 {
        return Err(TrainError::NoValidationWindows);
    }
    Ok(sq_sum / count as f64)
}
