//! Multi-step temperature prediction and the convexity audit.
//!
//! A one-step model predicts ΔT_br over its sampling interval. Longer
//! horizons chain evaluations: each predicted ΔT feeds the lag slots of the
//! next step's feature vector, and the running temperature accumulates
//! `T_{k+1} = T_k + ΔT_{k+1}`. Plans mix rates — fine 20-minute steps first,
//! then coarse 180-minute steps — with one seam where the coarse model's
//! lag-1 is synthesised as the *sum* of the fine-step ΔTs (temperature
//! deltas are additive) and lags 2–3 come from measured coarse history.
//!
//! Exogenous features are frozen or forecast, never fed back: δT_amb is the
//! forecast ambient minus the *measured start* temperature, and δT_l keeps
//! its value at the start of the horizon. Feeding the predicted room
//! temperature back into those slots would subtract a convex function of
//! the inputs and destroy the convexity the controller relies on.
//!
//! [`audit_convexity`] samples midpoint convexity and monotonicity of the
//! predicted temperatures with respect to the control inputs and initial
//! lags. For Mpc-mode models both hold by construction; the audit is the
//! numerical witness, and the Eq.-style counterexample in
//! [`amos_counterexample`] shows the unconstrained mode genuinely failing it.

mod audit;

pub use audit::{amos_counterexample, audit_convexity, AuditConfig, AuditReport, StepReport};

use chrono::NaiveDateTime;
use thiserror::Error;

use crate::features::{
    encode_time, FeatureVector, Y_DIM, YTILDE_DIM, Y_DT_AMB, Y_DT_K, Y_DT_KM1, Y_DT_KM2, Y_QU,
    YT_DT_L, YT_QSOL_K, YT_QSOL_KM1, YT_QSOL_KM2, YT_TCOS, YT_TSIN,
};
use crate::icnn::IcnnError;
use crate::model::TrainedModel;

/// One homogeneous stretch of a prediction plan.
#[derive(Debug, Clone)]
pub struct Segment<'a> {
    pub model: &'a TrainedModel,
    pub steps: usize,
}

/// Fine-to-coarse sequence of segments; at most one rate increase.
#[derive(Debug, Clone)]
pub struct RolloutPlan<'a> {
    pub segments: Vec<Segment<'a>>,
}

impl<'a> RolloutPlan<'a> {
    pub fn new(segments: Vec<Segment<'a>>) -> Result<Self, RolloutError> {
        if segments.is_empty() || segments.iter().all(|s| s.steps == 0) {
            return Err(RolloutError::EmptyPlan);
        }
        let rates: Vec<u32> = segments.iter().map(|s| s.model.rate_minutes).collect();
        if rates.windows(2).any(|w| w[1] < w[0]) {
            return Err(RolloutError::NotFineToCoarse);
        }
        Ok(RolloutPlan { segments })
    }

    /// The standard horizon: three fine steps, then two coarse steps.
    pub fn standard(fine: &'a TrainedModel, coarse: &'a TrainedModel) -> Result<Self, RolloutError> {
        RolloutPlan::new(vec![
            Segment { model: fine, steps: 3 },
            Segment { model: coarse, steps: 2 },
        ])
    }

    pub fn total_steps(&self) -> usize {
        self.segments.iter().map(|s| s.steps).sum()
    }

    /// Total horizon in minutes.
    pub fn horizon_minutes(&self) -> u32 {
        self.segments.iter().map(|s| s.model.rate_minutes * s.steps as u32).sum()
    }

    /// Minutes from the horizon start to the *start* of each step. Useful for
    /// stamping disturbance forecasts.
    pub fn step_offsets_minutes(&self) -> Vec<u32> {
        let mut offsets = Vec::with_capacity(self.total_steps());
        let mut at = 0u32;
        for seg in &self.segments {
            for _ in 0..seg.steps {
                offsets.push(at);
                at += seg.model.rate_minutes;
            }
        }
        offsets
    }

    /// Move-blocking scale of each step: how many base-rate intervals it
    /// spans, with the first segment's rate as the base. An actuation level
    /// held constant across a coarse step delivers `level × scale` energy,
    /// which is what the coarse model's Q_u feature was fitted on (window
    /// sums). Scaling is linear with positive factors, so convexity and
    /// monotonicity in the held levels carry over from the energies.
    pub fn step_scales(&self) -> Vec<f64> {
        let base = self
            .segments
            .iter()
            .find(|s| s.steps > 0)
            .map(|s| s.model.rate_minutes as f64)
            .expect("plans have at least one step");
        let mut scales = Vec::with_capacity(self.total_steps());
        for seg in &self.segments {
            for _ in 0..seg.steps {
                scales.push(seg.model.rate_minutes as f64 / base);
            }
        }
        scales
    }
}

/// Measured state at the start of a horizon, at the first segment's rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutHistory {
    pub t_start: f64,
    /// ΔT_br lags, most recent first: [ΔT_k, ΔT_k−1, ΔT_k−2].
    pub delta_t_lags: [f64; 3],
    /// Q_sol lags, most recent first: [Q_sol_k−1, Q_sol_k−2].
    pub q_sol_lags: [f64; 2],
    /// δT_l at the start, frozen over the horizon.
    pub delta_t_l: f64,
    /// Measured ΔT_br at the coarse rate, most recent first; consumed at a
    /// rate seam as coarse lags 2–3 (lag 1 is the summed fine prediction).
    pub coarse_delta_t: [f64; 2],
    /// Measured coarse-window Q_sol means, most recent first.
    pub coarse_q_sol: [f64; 2],
}

/// Exogenous forecasts for one prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    /// Start of the step this record covers.
    pub timestamp: NaiveDateTime,
    /// Solar irradiation over the step, W/m².
    pub q_sol: f64,
    /// Ambient temperature over the step, °C.
    pub t_amb: f64,
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("plan has no steps")]
    EmptyPlan,
    #[error("plan segments must be ordered fine to coarse")]
    NotFineToCoarse,
    #[error("plan needs {need} inputs/disturbances, got {got}")]
    LengthMismatch { need: usize, got: usize },
    #[error(transparent)]
    Icnn(#[from] IcnnError),
}

/// Predict the room temperature after each step of `plan`.
///
/// `u` holds one energy input (kWh) per step; `disturbances` one forecast
/// per step. Returns `plan.total_steps()` temperatures. Pure and
/// deterministic: identical inputs give bit-identical trajectories.
pub fn predict_trajectory(
    plan: &RolloutPlan,
    history: &RolloutHistory,
    disturbances: &[Disturbance],
    u: &[f64],
) -> Result<Vec<f64>, RolloutError> {
    let total = plan.total_steps();
    if u.len() != total {
        return Err(RolloutError::LengthMismatch { need: total, got: u.len() });
    }
    if disturbances.len() != total {
        return Err(RolloutError::LengthMismatch { need: total, got: disturbances.len() });
    }

    let mut out = Vec::with_capacity(total);
    let mut t_room = history.t_start;
    // Lag state at the current segment's rate.
    let mut dt_lags = history.delta_t_lags;
    let mut qsol_lags = history.q_sol_lags;
    // Records of the finished fine segment, for seam synthesis.
    let mut seg_dts: Vec<f64> = Vec::new();
    let mut seg_qsols: Vec<f64> = Vec::new();
    let mut prev_rate: Option<u32> = None;
    let mut step = 0usize;

    for seg in &plan.segments {
        if seg.steps == 0 {
            continue;
        }
        if let Some(prev) = prev_rate {
            if seg.model.rate_minutes != prev {
                // Rate seam: coarse lag-1 is the sum of the fine ΔTs (deltas
                // are additive over sub-intervals — and a sum of convex
                // non-decreasing functions stays convex non-decreasing);
                // older lags come from measured coarse history. Q_sol
                // mirrors with window means.
                let fine_sum: f64 = seg_dts.iter().sum();
                dt_lags = [fine_sum, history.coarse_delta_t[0], history.coarse_delta_t[1]];
                let fine_mean = seg_qsols.iter().sum::<f64>() / seg_qsols.len() as f64;
                qsol_lags = [fine_mean, history.coarse_q_sol[0]];
            }
        }
        seg_dts.clear();
        seg_qsols.clear();
        for _ in 0..seg.steps {
            let d = &disturbances[step];
            let (t_sin, t_cos) = encode_time(d.timestamp);
            let mut y = [0.0; Y_DIM];
            y[Y_DT_AMB] = d.t_amb - history.t_start; // frozen reference
            y[Y_DT_K] = dt_lags[0];
            y[Y_DT_KM1] = dt_lags[1];
            y[Y_DT_KM2] = dt_lags[2];
            y[Y_QU] = u[step];
            let mut ytilde = [0.0; YTILDE_DIM];
            ytilde[YT_QSOL_K] = d.q_sol;
            ytilde[YT_QSOL_KM1] = qsol_lags[0];
            ytilde[YT_QSOL_KM2] = qsol_lags[1];
            ytilde[YT_TSIN] = t_sin;
            ytilde[YT_TCOS] = t_cos;
            ytilde[YT_DT_L] = history.delta_t_l;
            let delta = seg.model.predict_delta(&FeatureVector { y, ytilde })?;
            t_room += delta;
            out.push(t_room);
            dt_lags = [delta, dt_lags[0], dt_lags[1]];
            qsol_lags = [d.q_sol, qsol_lags[0]];
            seg_dts.push(delta);
            seg_qsols.push(d.q_sol);
            step += 1;
        }
        prev_rate = Some(seg.model.rate_minutes);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::features::{RATE_COARSE_MIN, RATE_FINE_MIN};
    use crate::icnn::{FicnnLayer, FicnnParams, IcnnParams, Mode};
    use crate::linalg::Mat;
    use crate::model::ModelFamily;
    use crate::norm::Normalizer;
    use chrono::NaiveDate;

    fn ts0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2023, 7, 3).unwrap().and_hms_opt(12, 0, 0).unwrap()
    }

    /// One-layer network computing an affine function of selected y slots,
    /// with identity standardisation so weights act on physical values.
    fn affine_model(rate: u32, wy_row: [f64; Y_DIM + YTILDE_DIM], b: f64) -> TrainedModel {
        let params = IcnnParams::Ficnn(FicnnParams {
            mode: Mode::Mpc,
            input_dim: Y_DIM + YTILDE_DIM,
            layers: vec![FicnnLayer {
                wz: None,
                wy: Mat::from_rows(&[wy_row.to_vec()]),
                b: vec![b],
                g: Activation::Identity,
            }],
        });
        TrainedModel {
            family: ModelFamily::FicnnMpc,
            rate_minutes: rate,
            params,
            norm: Normalizer::identity(Y_DIM, YTILDE_DIM),
        }
    }

    fn zero_model(rate: u32) -> TrainedModel {
        affine_model(rate, [0.0; Y_DIM + YTILDE_DIM], 0.0)
    }

    fn history() -> RolloutHistory {
        RolloutHistory {
            t_start: 23.0,
            delta_t_lags: [0.1, -0.05, 0.2],
            q_sol_lags: [250.0, 300.0],
            delta_t_l: 0.5,
            coarse_delta_t: [0.4, -0.2],
            coarse_q_sol: [180.0, 120.0],
        }
    }

    fn disturbances(n: usize, rate: u32) -> Vec<Disturbance> {
        (0..n)
            .map(|i| Disturbance {
                timestamp: ts0() + chrono::Duration::minutes(rate as i64 * i as i64),
                q_sol: 200.0 + 10.0 * i as f64,
                t_amb: 30.0,
            })
            .collect()
    }

    #[test]
    fn zero_model_keeps_the_temperature_constant() {
        let fine = zero_model(RATE_FINE_MIN);
        let coarse = zero_model(RATE_COARSE_MIN);
        let plan = RolloutPlan::standard(&fine, &coarse).unwrap();
        let traj =
            predict_trajectory(&plan, &history(), &disturbances(5, RATE_FINE_MIN), &[0.0; 5])
                .unwrap();
        assert_eq!(traj, vec![23.0; 5]);
    }

    #[test]
    fn single_step_equals_one_forward_pass_plus_add() {
        let mut row = [0.0; Y_DIM + YTILDE_DIM];
        row[Y_DT_K] = 0.5;
        row[Y_QU] = 1.0;
        let model = affine_model(RATE_FINE_MIN, row, 0.02);
        let plan =
            RolloutPlan::new(vec![Segment { model: &model, steps: 1 }]).unwrap();
        let h = history();
        let traj = predict_trajectory(&plan, &h, &disturbances(1, RATE_FINE_MIN), &[-0.3]).unwrap();
        let expected_delta = 0.5 * h.delta_t_lags[0] + 1.0 * (-0.3) + 0.02;
        assert_eq!(traj, vec![h.t_start + expected_delta]);
    }

    #[test]
    fn two_step_rollout_matches_hand_unrolled_recursion() {
        // ΔT̂ = 0.5·ΔT_k + 1.0·Q_u: the second step must see the first
        // step's prediction in its lag slot.
        let mut row = [0.0; Y_DIM + YTILDE_DIM];
        row[Y_DT_K] = 0.5;
        row[Y_QU] = 1.0;
        let model = affine_model(RATE_FINE_MIN, row, 0.0);
        let plan = RolloutPlan::new(vec![Segment { model: &model, steps: 2 }]).unwrap();
        let h = history();
        let u = [-0.2, -0.1];
        let traj = predict_trajectory(&plan, &h, &disturbances(2, RATE_FINE_MIN), &u).unwrap();
        let d1 = 0.5 * h.delta_t_lags[0] + u[0];
        let d2 = 0.5 * d1 + u[1];
        assert_eq!(traj, vec![h.t_start + d1, h.t_start + d1 + d2]);
    }

    #[test]
    fn seam_feeds_the_summed_fine_deltas_to_the_coarse_model() {
        // Fine model: ΔT̂ = Q_u. Coarse model: ΔT̂ = ΔT_k + 0.25·ΔT_k−1
        //                                            + 0.125·ΔT_k−2.
        let mut fine_row = [0.0; Y_DIM + YTILDE_DIM];
        fine_row[Y_QU] = 1.0;
        let fine = affine_model(RATE_FINE_MIN, fine_row, 0.0);
        let mut coarse_row = [0.0; Y_DIM + YTILDE_DIM];
        coarse_row[Y_DT_K] = 1.0;
        coarse_row[Y_DT_KM1] = 0.25;
        coarse_row[Y_DT_KM2] = 0.125;
        let coarse = affine_model(RATE_COARSE_MIN, coarse_row, 0.0);
        let plan = RolloutPlan::standard(&fine, &coarse).unwrap();
        let h = history();
        let u = [-0.1, -0.2, -0.3, 0.0, 0.0];
        let traj = predict_trajectory(&plan, &h, &disturbances(5, RATE_FINE_MIN), &u).unwrap();
        let fine_sum = -0.6;
        let d4 = fine_sum + 0.25 * h.coarse_delta_t[0] + 0.125 * h.coarse_delta_t[1];
        let d5 = d4 + 0.25 * fine_sum + 0.125 * h.coarse_delta_t[0];
        let t3 = h.t_start + fine_sum;
        assert!((traj[2] - t3).abs() < 1e-12);
        assert!((traj[3] - (t3 + d4)).abs() < 1e-12);
        assert!((traj[4] - (t3 + d4 + d5)).abs() < 1e-12);
    }

    #[test]
    fn seam_averages_fine_solar_into_the_coarse_lag() {
        // Coarse model reads Q_sol_k−1 only; its value at the seam must be
        // the mean of the fine-segment forecasts.
        let mut coarse_row = [0.0; Y_DIM + YTILDE_DIM];
        coarse_row[Y_DIM + YT_QSOL_KM1] = 1.0;
        let fine = zero_model(RATE_FINE_MIN);
        let coarse = affine_model(RATE_COARSE_MIN, coarse_row, 0.0);
        let plan = RolloutPlan::standard(&fine, &coarse).unwrap();
        let d = disturbances(5, RATE_FINE_MIN);
        let traj = predict_trajectory(&plan, &history(), &d, &[0.0; 5]).unwrap();
        let fine_mean = (d[0].q_sol + d[1].q_sol + d[2].q_sol) / 3.0;
        assert_eq!(traj[3], 23.0 + fine_mean);
    }

    #[test]
    fn delta_t_amb_is_frozen_at_the_start_temperature() {
        // Model reads δT_amb only. If the reference temperature followed the
        // prediction, the second step would see a smaller δT_amb; frozen, it
        // sees the same one.
        let mut row = [0.0; Y_DIM + YTILDE_DIM];
        row[Y_DT_AMB] = 1.0;
        let model = affine_model(RATE_FINE_MIN, row, 0.0);
        let plan = RolloutPlan::new(vec![Segment { model: &model, steps: 2 }]).unwrap();
        let h = history();
        let traj = predict_trajectory(&plan, &h, &disturbances(2, RATE_FINE_MIN), &[0.0; 2]).unwrap();
        let per_step = 30.0 - h.t_start;
        assert_eq!(traj, vec![23.0 + per_step, 23.0 + 2.0 * per_step]);
    }

    #[test]
    fn wrong_lengths_are_reported() {
        let fine = zero_model(RATE_FINE_MIN);
        let plan = RolloutPlan::new(vec![Segment { model: &fine, steps: 3 }]).unwrap();
        assert!(matches!(
            predict_trajectory(&plan, &history(), &disturbances(3, RATE_FINE_MIN), &[0.0; 2]),
            Err(RolloutError::LengthMismatch { need: 3, got: 2 })
        ));
        assert!(matches!(
            predict_trajectory(&plan, &history(), &disturbances(2, RATE_FINE_MIN), &[0.0; 3]),
            Err(RolloutError::LengthMismatch { need: 3, got: 2 })
        ));
    }

    #[test]
    fn coarse_before_fine_is_rejected() {
        let fine = zero_model(RATE_FINE_MIN);
        let coarse = zero_model(RATE_COARSE_MIN);
        let err = RolloutPlan::new(vec![
            Segment { model: &coarse, steps: 2 },
            Segment { model: &fine, steps: 3 },
        ]);
        assert!(matches!(err, Err(RolloutError::NotFineToCoarse)));
    }
}
