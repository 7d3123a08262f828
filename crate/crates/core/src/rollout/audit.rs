//! Sampling audit of the convexity and monotonicity guarantees.
//!
//! For Mpc-mode models every predicted temperature `T_k` is, by construction,
//! convex and non-decreasing in the energy inputs `u_0..u_{k-1}` and in the
//! initial ΔT lags. [`audit_convexity`] probes both properties numerically:
//! midpoint convexity at λ ∈ {¼, ½, ¾} on random input pairs, and
//! non-decrease under random single-coordinate increases. Violations are
//! counted per step and reported, never thrown — the audit is a measurement,
//! and for unconstrained (Amos-mode) models a non-empty report is the
//! expected outcome, not an error.
//!
//! [`amos_counterexample`] builds the explicit two-step failure: a tiny
//! Amos-mode network that is perfectly feasible for its own mode, yet whose
//! two-step composition is *concave* in the first input, with a midpoint gap
//! of 0.3 K — far beyond anything attributable to rounding.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{predict_trajectory, Disturbance, RolloutError, RolloutHistory, RolloutPlan, Segment};
use crate::activation::Activation;
use crate::features::{Y_DIM, YTILDE_DIM, Y_DT_K, Y_QU, RATE_FINE_MIN};
use crate::icnn::{FicnnLayer, FicnnParams, IcnnParams, Mode};
use crate::linalg::Mat;
use crate::mix_seed;
use crate::model::{ModelFamily, TrainedModel};
use crate::norm::Normalizer;

/// Sampling parameters for [`audit_convexity`].
#[derive(Debug, Clone)]
pub struct AuditConfig {
    /// Number of random input pairs to draw.
    pub samples: usize,
    /// A gap above this counts as a violation; everything below is rounding.
    pub tolerance: f64,
    /// Bounds for the per-step energy inputs, kWh.
    pub u_box: (f64, f64),
    /// Bounds for the initial ΔT lags (fine and coarse), K.
    pub lag_box: (f64, f64),
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            samples: 10_000,
            tolerance: 1e-9,
            u_box: (-0.6, 0.0),
            lag_box: (-1.0, 1.0),
            seed: 0,
        }
    }
}

/// Violations observed for one prediction step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub convexity_violations: usize,
    pub monotonicity_violations: usize,
    /// Largest observed `f(mid) - λ f(a) - (1-λ) f(b)`; positive would mean
    /// the midpoint sits *above* the chord.
    pub worst_convexity_gap: f64,
    /// Largest observed temperature *drop* after increasing one input.
    pub worst_monotonicity_gap: f64,
}

impl StepReport {
    pub fn violations(&self) -> usize {
        self.convexity_violations + self.monotonicity_violations
    }

    pub fn worst_gap(&self) -> f64 {
        self.worst_convexity_gap.max(self.worst_monotonicity_gap)
    }
}

/// Outcome of a convexity/monotonicity audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub samples: usize,
    pub tolerance: f64,
    pub steps: Vec<StepReport>,
}

impl AuditReport {
    pub fn total_violations(&self) -> usize {
        self.steps.iter().map(|s| s.violations()).sum()
    }

    /// Largest gap of either kind across all steps.
    pub fn worst_gap(&self) -> f64 {
        self.steps.iter().map(|s| s.worst_gap()).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.total_violations() == 0
    }
}

/// Per-step accumulators, mergeable so samples can run in parallel.
struct Tally {
    conv: Vec<usize>,
    mono: Vec<usize>,
    conv_gap: Vec<f64>,
    mono_gap: Vec<f64>,
}

impl Tally {
    fn new(steps: usize) -> Tally {
        Tally {
            conv: vec![0; steps],
            mono: vec![0; steps],
            conv_gap: vec![f64::NEG_INFINITY; steps],
            mono_gap: vec![f64::NEG_INFINITY; steps],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for k in 0..self.conv.len() {
            self.conv[k] += other.conv[k];
            self.mono[k] += other.mono[k];
            self.conv_gap[k] = self.conv_gap[k].max(other.conv_gap[k]);
            self.mono_gap[k] = self.mono_gap[k].max(other.mono_gap[k]);
        }
        self
    }
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// The audited input bundle: everything `T_k` is claimed to be convex and
/// non-decreasing in. Exogenous context (weather, time, δT_l, Q_sol lags)
/// stays fixed within a sample.
#[derive(Clone)]
struct Bundle {
    u: Vec<f64>,
    lags: [f64; 3],
    coarse: [f64; 2],
}

impl Bundle {
    /// `scales` widens each step's energy box by its move-blocking factor,
    /// so coarse steps are audited over the block energies they actually
    /// receive, not just the per-level box.
    fn random(rng: &mut ChaCha8Rng, scales: &[f64], cfg: &AuditConfig) -> Bundle {
        let (ulo, uhi) = cfg.u_box;
        let (llo, lhi) = cfg.lag_box;
        Bundle {
            u: scales.iter().map(|s| draw(rng, ulo * s, uhi * s)).collect(),
            lags: [draw(rng, llo, lhi), draw(rng, llo, lhi), draw(rng, llo, lhi)],
            coarse: [draw(rng, llo, lhi), draw(rng, llo, lhi)],
        }
    }

    fn mix(&self, other: &Bundle, lambda: f64) -> Bundle {
        let m = |a: f64, b: f64| lambda * a + (1.0 - lambda) * b;
        Bundle {
            u: self.u.iter().zip(&other.u).map(|(&a, &b)| m(a, b)).collect(),
            lags: [
                m(self.lags[0], other.lags[0]),
                m(self.lags[1], other.lags[1]),
                m(self.lags[2], other.lags[2]),
            ],
            coarse: [m(self.coarse[0], other.coarse[0]), m(self.coarse[1], other.coarse[1])],
        }
    }

    fn dim(&self) -> usize {
        self.u.len() + 5
    }

    fn coord(&self, c: usize) -> f64 {
        let n = self.u.len();
        if c < n {
            self.u[c]
        } else if c < n + 3 {
            self.lags[c - n]
        } else {
            self.coarse[c - n - 3]
        }
    }

    fn with_coord(&self, c: usize, value: f64) -> Bundle {
        let mut out = self.clone();
        let n = out.u.len();
        if c < n {
            out.u[c] = value;
        } else if c < n + 3 {
            out.lags[c - n] = value;
        } else {
            out.coarse[c - n - 3] = value;
        }
        out
    }

    /// Upper bound of the box this coordinate was drawn from.
    fn coord_hi(&self, c: usize, cfg: &AuditConfig, scales: &[f64]) -> f64 {
        if c < self.u.len() {
            cfg.u_box.1 * scales[c]
        } else {
            cfg.lag_box.1
        }
    }

    fn history(&self, base: &RolloutHistory) -> RolloutHistory {
        RolloutHistory {
            delta_t_lags: self.lags,
            coarse_delta_t: self.coarse,
            ..*base
        }
    }
}

fn audit_one(
    plan: &RolloutPlan,
    cfg: &AuditConfig,
    index: usize,
) -> Result<Tally, RolloutError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let steps = plan.total_steps();
    let mut tally = Tally::new(steps);

    // Fixed exogenous context for this sample.
    let t0 = NaiveDate::from_ymd_opt(2023, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
        + Duration::minutes(rng.random_range(0..28 * 24 * 60));
    let base = RolloutHistory {
        t_start: draw(&mut rng, 21.0, 25.0),
        delta_t_lags: [0.0; 3],
        q_sol_lags: [draw(&mut rng, 0.0, 400.0), draw(&mut rng, 0.0, 400.0)],
        delta_t_l: draw(&mut rng, -2.0, 2.0),
        coarse_delta_t: [0.0; 2],
        coarse_q_sol: [draw(&mut rng, 0.0, 400.0), draw(&mut rng, 0.0, 400.0)],
    };
    let disturbances: Vec<Disturbance> = plan
        .step_offsets_minutes()
        .into_iter()
        .map(|m| Disturbance {
            timestamp: t0 + Duration::minutes(m as i64),
            q_sol: draw(&mut rng, 0.0, 800.0),
            t_amb: draw(&mut rng, 18.0, 35.0),
        })
        .collect();

    let scales = plan.step_scales();
    let a = Bundle::random(&mut rng, &scales, cfg);
    let b = Bundle::random(&mut rng, &scales, cfg);
    let f_a = predict_trajectory(plan, &a.history(&base), &disturbances, &a.u)?;
    let f_b = predict_trajectory(plan, &b.history(&base), &disturbances, &b.u)?;

    for &lambda in &[0.25, 0.5, 0.75] {
        let mid = a.mix(&b, lambda);
        let f_m = predict_trajectory(plan, &mid.history(&base), &disturbances, &mid.u)?;
        for k in 0..steps {
            let gap = f_m[k] - (lambda * f_a[k] + (1.0 - lambda) * f_b[k]);
            tally.conv_gap[k] = tally.conv_gap[k].max(gap);
            if gap > cfg.tolerance {
                tally.conv[k] += 1;
            }
        }
    }

    // Raise each coordinate of `a` on its own; no temperature may drop.
    for c in 0..a.dim() {
        let headroom = a.coord_hi(c, cfg, &scales) - a.coord(c);
        if headroom <= 0.0 {
            continue;
        }
        let raised = a.with_coord(c, a.coord(c) + rng.random_range(0.0..headroom));
        let f_r = predict_trajectory(plan, &raised.history(&base), &disturbances, &raised.u)?;
        for k in 0..steps {
            let gap = f_a[k] - f_r[k];
            tally.mono_gap[k] = tally.mono_gap[k].max(gap);
            if gap > cfg.tolerance {
                tally.mono[k] += 1;
            }
        }
    }

    Ok(tally)
}

/// Probe midpoint convexity and monotone non-decrease of every predicted
/// `T_k` with respect to the energy inputs and initial ΔT lags.
///
/// Each sample fixes a random exogenous context, draws an input pair inside
/// the configured boxes, tests the chord at λ ∈ {¼, ½, ¾}, and then raises
/// each input coordinate individually. Deterministic for a fixed seed
/// regardless of thread count: every sample seeds its own generator.
pub fn audit_convexity(plan: &RolloutPlan, cfg: &AuditConfig) -> Result<AuditReport, RolloutError> {
    let steps = plan.total_steps();
    let tally = (0..cfg.samples)
        .into_par_iter()
        .map(|i| audit_one(plan, cfg, i))
        .try_reduce(|| Tally::new(steps), |x, y| Ok(x.merge(y)))?;
    let steps = (0..steps)
        .map(|k| StepReport {
            step: k,
            convexity_violations: tally.conv[k],
            monotonicity_violations: tally.mono[k],
            worst_convexity_gap: tally.conv_gap[k],
            worst_monotonicity_gap: tally.mono_gap[k],
        })
        .collect();
    Ok(AuditReport { samples: cfg.samples, tolerance: cfg.tolerance, steps })
}

/// A two-step convexity failure that Amos-mode weight constraints permit.
///
/// The network computes `ΔT̂ = relu(Q_u + 0.3) − 3·ΔT_k` — feasible in Amos
/// mode, where `W^(y)` may be negative. Over two steps the first input is
/// fed back through the negative lag weight, so
/// `T_2 = T_0 − 2·relu(u_0 + 0.3) + relu(u_1 + 0.3)`: concave in `u_0`, and
/// *decreasing* in it past the kink. The bundled input pair straddles the
/// kink and exhibits a midpoint gap of 0.3 K.
#[derive(Debug, Clone)]
pub struct AmosCounterexample {
    pub model: TrainedModel,
    pub history: RolloutHistory,
    pub disturbances: Vec<Disturbance>,
    pub u_a: Vec<f64>,
    pub u_b: Vec<f64>,
    pub lambda: f64,
}

impl AmosCounterexample {
    /// Two fine steps of the counterexample model.
    pub fn plan(&self) -> RolloutPlan<'_> {
        RolloutPlan::new(vec![Segment { model: &self.model, steps: 2 }])
            .expect("two-step plan is valid")
    }

    pub fn u_mid(&self) -> Vec<f64> {
        self.u_a
            .iter()
            .zip(&self.u_b)
            .map(|(&a, &b)| self.lambda * a + (1.0 - self.lambda) * b)
            .collect()
    }

    /// `T_2(mid) − λ·T_2(a) − (1−λ)·T_2(b)`; positive breaks convexity.
    pub fn midpoint_gap(&self) -> Result<f64, RolloutError> {
        let plan = self.plan();
        let f_a = predict_trajectory(&plan, &self.history, &self.disturbances, &self.u_a)?;
        let f_b = predict_trajectory(&plan, &self.history, &self.disturbances, &self.u_b)?;
        let f_m = predict_trajectory(&plan, &self.history, &self.disturbances, &self.u_mid())?;
        let last = plan.total_steps() - 1;
        Ok(f_m[last] - (self.lambda * f_a[last] + (1.0 - self.lambda) * f_b[last]))
    }
}

pub fn amos_counterexample() -> AmosCounterexample {
    let din = Y_DIM + YTILDE_DIM;
    let mut wy0 = vec![0.0; din];
    wy0[Y_QU] = 1.0;
    let mut wy1 = vec![0.0; din];
    wy1[Y_DT_K] = -3.0;
    let params = IcnnParams::Ficnn(FicnnParams {
        mode: Mode::Amos,
        input_dim: din,
        layers: vec![
            FicnnLayer {
                wz: None,
                wy: Mat::from_rows(&[wy0]),
                b: vec![0.3],
                g: Activation::Relu,
            },
            FicnnLayer {
                wz: Some(Mat::from_rows(&[vec![1.0]])),
                wy: Mat::from_rows(&[wy1]),
                b: vec![0.0],
                g: Activation::Identity,
            },
        ],
    });
    params.validate().expect("counterexample network is well-formed");
    params.check_feasible().expect("counterexample satisfies Amos-mode constraints");
    let model = TrainedModel {
        family: ModelFamily::FicnnAmos,
        rate_minutes: RATE_FINE_MIN,
        params,
        norm: Normalizer::identity(Y_DIM, YTILDE_DIM),
    };
    let t_start = 23.0;
    let t0 = NaiveDate::from_ymd_opt(2023, 6, 5).unwrap().and_hms_opt(9, 0, 0).unwrap();
    let disturbances = (0..2)
        .map(|i| Disturbance {
            timestamp: t0 + Duration::minutes(RATE_FINE_MIN as i64 * i),
            q_sol: 0.0,
            t_amb: t_start,
        })
        .collect();
    AmosCounterexample {
        model,
        history: RolloutHistory {
            t_start,
            delta_t_lags: [0.0; 3],
            q_sol_lags: [0.0; 2],
            delta_t_l: 0.0,
            coarse_delta_t: [0.0; 2],
            coarse_q_sol: [0.0; 2],
        },
        disturbances,
        u_a: vec![-0.6, 0.0],
        u_b: vec![0.0, 0.0],
        lambda: 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RATE_COARSE_MIN;
    use crate::norm::ZScore;

    fn small_cfg(samples: usize, seed: u64) -> AuditConfig {
        AuditConfig { samples, seed, ..AuditConfig::default() }
    }

    /// Standardisation a model fitted on this climate would carry. Without
    /// it a freshly initialised PICNN sees raw irradiation values near 800
    /// and its multiplicative gates blow the activations up to ~1e20, where
    /// chord-vs-midpoint comparisons drown in floating-point rounding.
    fn realistic_norm() -> Normalizer {
        Normalizer {
            y: ZScore {
                mean: vec![0.0, 0.0, 0.0, 0.0, -0.3],
                scale: vec![5.0, 0.3, 0.3, 0.3, 0.2],
            },
            ytilde: ZScore {
                mean: vec![300.0, 300.0, 300.0, 0.0, 0.0, 0.0],
                scale: vec![250.0, 250.0, 250.0, 0.7, 0.7, 1.0],
            },
        }
    }

    fn init_model(family: ModelFamily, rate: u32, rng: &mut ChaCha8Rng) -> TrainedModel {
        let mut m = TrainedModel::init(family, rate, rng);
        m.norm = realistic_norm();
        m
    }

    #[test]
    fn mpc_mode_models_pass_a_standard_plan_audit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for family in [ModelFamily::FicnnMpc, ModelFamily::PicnnMpc] {
            let fine = init_model(family, RATE_FINE_MIN, &mut rng);
            let coarse = init_model(family, RATE_COARSE_MIN, &mut rng);
            let plan = RolloutPlan::standard(&fine, &coarse).unwrap();
            let report = audit_convexity(&plan, &small_cfg(400, 11)).unwrap();
            assert_eq!(report.total_violations(), 0, "{family}: {report:?}");
            assert!(report.passed());
            assert_eq!(report.steps.len(), 5);
            // Rounding keeps observed gaps at the tolerance scale, not zero.
            assert!(report.worst_gap() <= report.tolerance);
        }
    }

    #[test]
    fn the_audit_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fine = init_model(ModelFamily::FicnnMpc, RATE_FINE_MIN, &mut rng);
        let plan = RolloutPlan::new(vec![Segment { model: &fine, steps: 3 }]).unwrap();
        let r1 = audit_convexity(&plan, &small_cfg(200, 5)).unwrap();
        let r2 = audit_convexity(&plan, &small_cfg(200, 5)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn counterexample_gap_matches_the_hand_derivation() {
        let cx = amos_counterexample();
        let gap = cx.midpoint_gap().unwrap();
        assert!((gap - 0.3).abs() < 1e-12, "gap {gap}");
    }

    #[test]
    fn the_audit_catches_the_amos_counterexample() {
        let cx = amos_counterexample();
        let plan = cx.plan();
        let report = audit_convexity(&plan, &small_cfg(500, 1)).unwrap();
        assert!(!report.passed());
        let conv: usize = report.steps.iter().map(|s| s.convexity_violations).sum();
        let mono: usize = report.steps.iter().map(|s| s.monotonicity_violations).sum();
        assert!(conv > 0, "{report:?}");
        assert!(mono > 0, "{report:?}");
        assert!(report.worst_gap() > 1e-3, "{report:?}");
        // The failure needs the feedback step: step 0 alone is convex.
        assert_eq!(report.steps[0].convexity_violations, 0);
    }

    #[test]
    fn one_step_amos_predictions_stay_convex_but_not_monotone() {
        // A single evaluation of the counterexample net is convex in u — the
        // concavity comes only from composition — but its negative lag weight
        // already breaks monotonicity in the initial lags.
        let cx = amos_counterexample();
        let plan = RolloutPlan::new(vec![Segment { model: &cx.model, steps: 1 }]).unwrap();
        let report = audit_convexity(&plan, &small_cfg(500, 2)).unwrap();
        let conv: usize = report.steps.iter().map(|s| s.convexity_violations).sum();
        let mono: usize = report.steps.iter().map(|s| s.monotonicity_violations).sum();
        assert_eq!(conv, 0, "{report:?}");
        assert!(mono > 0, "{report:?}");
    }
}
