//! Soft-constrained receding-horizon control over learned dynamics.
//!
//! The per-horizon problem is
//!
//! ```text
//!   min_{u, ε}  Σ_k  r·u_k² + λ·ε_k²
//!   s.t.        x_min,k − ε_k ≤ x_k(u) ≤ x_max,k + ε_k,
//!               ε_k ≥ 0,   u_min ≤ u_k ≤ u_max,
//! ```
//!
//! where `x_k(u)` is the predicted room temperature after step `k`. Slack
//! makes the problem always feasible: comfort violations are paid for, never
//! fatal. Because each `ε_k` enters the cost monotonically, the inner
//! minimum has a closed form — the violation magnitude itself — so
//! [`eliminate_slack`] reduces the search space to the `u` box alone, and a
//! derivative-free trust-region method ([`solver::TrustRegionSolver`])
//! handles the reduced objective. With Mpc-mode dynamics the upper-bound
//! part of the cost is convex in `u` and the lower-bound part is monotone,
//! which keeps 1-D restrictions of the objective unimodal — the structure
//! the solver relies on.

mod controller;
mod solver;

pub use controller::{
    ControlDecision, ControllerConfig, Forecaster, Measurement, MpcController, PersistenceForecast,
};
pub use solver::{Solver, SolverConfig, SolverRun, TrustRegionSolver};

use std::time::Instant;

use chrono::{NaiveDateTime, Timelike};
use thiserror::Error;

use crate::rollout::{predict_trajectory, Disturbance, RolloutError, RolloutHistory, RolloutPlan};

/// Comfort band for one step, °C.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub x_min: f64,
    pub x_max: f64,
}

/// Anything that can turn an input sequence into a predicted temperature
/// trajectory. The controller uses ICNN rollouts; tests and oracles plug in
/// closed-form toys.
pub trait Dynamics {
    fn steps(&self) -> usize;
    /// Temperature at the end of each step; must return `steps()` values.
    fn trajectory(&self, u: &[f64]) -> Result<Vec<f64>, MpcError>;
}

/// ICNN rollout dynamics: a plan plus the frozen context it runs in.
///
/// Decision variables are actuation *levels* at the base (fine) rate, all
/// sharing one input box. Move blocking holds a level constant across a
/// coarse step, so the block delivers `level × step_scale` energy — that
/// product, not the raw level, is what the coarse model's Q_u feature sees.
///
/// `offset` is added to every predicted temperature: the controller's
/// estimate of a constant output disturbance (its own recent one-step
/// error). A constant shift leaves convexity, monotonicity and the slack
/// elimination untouched.
pub struct PlanDynamics<'a> {
    pub plan: RolloutPlan<'a>,
    pub history: RolloutHistory,
    pub disturbances: Vec<Disturbance>,
    pub offset: f64,
}

impl Dynamics for PlanDynamics<'_> {
    fn steps(&self) -> usize {
        self.plan.total_steps()
    }

    fn trajectory(&self, u: &[f64]) -> Result<Vec<f64>, MpcError> {
        let energies: Vec<f64> =
            u.iter().zip(self.plan.step_scales()).map(|(&level, scale)| level * scale).collect();
        let mut x = predict_trajectory(&self.plan, &self.history, &self.disturbances, &energies)?;
        for xi in &mut x {
            *xi += self.offset;
        }
        Ok(x)
    }
}

/// Closed-form dynamics for tests and oracle comparisons.
pub struct FnDynamics<F: Fn(&[f64]) -> Vec<f64>> {
    pub steps: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> Dynamics for FnDynamics<F> {
    fn steps(&self) -> usize {
        self.steps
    }

    fn trajectory(&self, u: &[f64]) -> Result<Vec<f64>, MpcError> {
        Ok((self.f)(u))
    }
}

/// One receding-horizon instance with slack still implicit.
pub struct MpcProblem<D: Dynamics> {
    pub dynamics: D,
    /// Comfort band evaluated at the *end* of each step — the constraint
    /// binds the state the step produces.
    pub bands: Vec<Band>,
    /// Quadratic input cost weight, per kWh².
    pub r: f64,
    /// Quadratic slack cost weight, per K².
    pub lambda: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl<D: Dynamics> MpcProblem<D> {
    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.u_min <= self.u_max) {
            return Err(MpcError::BadBounds { u_min: self.u_min, u_max: self.u_max });
        }
        if !(self.r > 0.0) || !(self.lambda > 0.0) {
            return Err(MpcError::BadWeights { r: self.r, lambda: self.lambda });
        }
        if self.bands.len() != self.dynamics.steps() {
            return Err(MpcError::BandLength {
                need: self.dynamics.steps(),
                got: self.bands.len(),
            });
        }
        if let Some(step) = self.bands.iter().position(|b| !(b.x_min <= b.x_max)) {
            return Err(MpcError::BadBand { step });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("input bounds inverted: u_min {u_min} > u_max {u_max}")]
    BadBounds { u_min: f64, u_max: f64 },
    #[error("cost weights must be positive, got r={r}, lambda={lambda}")]
    BadWeights { r: f64, lambda: f64 },
    #[error("band schedule has {got} steps, dynamics have {need}")]
    BandLength { need: usize, got: usize },
    #[error("band at step {step} has x_min above x_max")]
    BadBand { step: usize },
    #[error("dynamics returned {got} states for {need} steps")]
    TrajectoryLength { need: usize, got: usize },
    #[error("objective is not finite at u = {u:?}")]
    NonFinite { u: Vec<f64> },
    #[error("controller history buffer is cold")]
    ColdHistory,
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("bad schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trajectory, optimal slack, and objective for a fixed input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EliminatedSlack {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub objective: f64,
}

/// Solve the inner slack minimization in closed form.
///
/// For fixed `u`, each `ε_k` appears only in its own constraint pair and in
/// the increasing cost term `λ·ε_k²`, so the minimizer is the smallest
/// feasible value: `ε*_k = max(0, x_k − x_max,k, x_min,k − x_k)`. At most
/// one side can be positive since `x_min ≤ x_max`. The reduction is exact —
/// no approximation is introduced.
pub fn eliminate_slack<D: Dynamics>(
    problem: &MpcProblem<D>,
    u: &[f64],
) -> Result<EliminatedSlack, MpcError> {
    let x = problem.dynamics.trajectory(u)?;
    if x.len() != problem.dynamics.steps() {
        return Err(MpcError::TrajectoryLength { need: problem.dynamics.steps(), got: x.len() });
    }
    let mut eps = Vec::with_capacity(x.len());
    let mut objective = 0.0;
    for (k, (&xk, band)) in x.iter().zip(&problem.bands).enumerate() {
        let e = (xk - band.x_max).max(band.x_min - xk).max(0.0);
        objective += problem.r * u[k] * u[k] + problem.lambda * e * e;
        eps.push(e);
    }
    if !objective.is_finite() {
        return Err(MpcError::NonFinite { u: u.to_vec() });
    }
    Ok(EliminatedSlack { x, eps, objective })
}

/// Solver output for one horizon.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Optimal inputs, kWh per step, inside the box.
    pub u: Vec<f64>,
    /// Predicted temperatures at `u`.
    pub x: Vec<f64>,
    /// Optimal slack at `u`.
    pub eps: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
    pub wall_ms: f64,
    /// False when the evaluation budget ran out before the trust region
    /// collapsed; the best iterate is still returned.
    pub converged: bool,
}

/// Minimize the slack-eliminated objective over the input box.
///
/// `warm_start` (typically the previous horizon's solution shifted by one
/// step) is clamped into the box; without one the search starts from zero
/// input, clamped.
pub fn solve<D: Dynamics>(
    problem: &MpcProblem<D>,
    solver: &dyn Solver,
    warm_start: Option<&[f64]>,
) -> Result<MpcSolution, MpcError> {
    problem.validate()?;
    let n = problem.dynamics.steps();
    let clamp = |v: f64| v.clamp(problem.u_min, problem.u_max);
    let start: Vec<f64> = match warm_start {
        Some(w) if w.len() == n => w.iter().map(|&v| clamp(v)).collect(),
        _ => vec![clamp(0.0); n],
    };
    let lower = vec![problem.u_min; n];
    let upper = vec![problem.u_max; n];
    let began = Instant::now();
    let run = solver.minimize(
        &mut |u| eliminate_slack(problem, u).map(|s| s.objective),
        &lower,
        &upper,
        &start,
    )?;
    let wall_ms = began.elapsed().as_secs_f64() * 1e3;
    let detail = eliminate_slack(problem, &run.u)?;
    Ok(MpcSolution {
        u: run.u,
        x: detail.x,
        eps: detail.eps,
        objective: run.objective,
        evaluations: run.evaluations,
        wall_ms,
        converged: run.converged,
    })
}

/// Scalar parabola dynamics with a comfort band: `x(u) = (u+0.5)² + 1`,
/// band [2, 4], `u ∈ [−3, 2]`. The optimal slack has all three regimes —
/// lower violation near the vertex, a feasible ring, upper violation far
/// out — with closed-form values, so it doubles as a solver/slack oracle.
pub fn parabola_toy_problem() -> MpcProblem<FnDynamics<fn(&[f64]) -> Vec<f64>>> {
    fn parabola(u: &[f64]) -> Vec<f64> {
        vec![(u[0] + 0.5) * (u[0] + 0.5) + 1.0]
    }
    MpcProblem {
        dynamics: FnDynamics { steps: 1, f: parabola },
        bands: vec![Band { x_min: 2.0, x_max: 4.0 }],
        r: 1.0,
        lambda: 100.0,
        u_min: -3.0,
        u_max: 2.0,
    }
}

/// Time-of-day comfort schedule, cyclic over 24 h.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Sorted by start minute; each entry applies from its start (inclusive)
    /// until the next entry's start, wrapping past midnight.
    entries: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    /// Minute of day in [0, 1440).
    pub start_minute: u32,
    pub x_min: f64,
    pub x_max: f64,
}

impl Schedule {
    pub fn new(mut entries: Vec<ScheduleEntry>) -> Result<Schedule, MpcError> {
        if entries.is_empty() {
            return Err(MpcError::Schedule("schedule needs at least one entry".into()));
        }
        entries.sort_by_key(|e| e.start_minute);
        for w in entries.windows(2) {
            if w[0].start_minute == w[1].start_minute {
                return Err(MpcError::Schedule(format!(
                    "duplicate schedule entry at minute {}",
                    w[0].start_minute
                )));
            }
        }
        for e in &entries {
            if e.start_minute >= 24 * 60 {
                return Err(MpcError::Schedule(format!(
                    "start minute {} outside a day",
                    e.start_minute
                )));
            }
            if !(e.x_min <= e.x_max) || !e.x_min.is_finite() || !e.x_max.is_finite() {
                return Err(MpcError::Schedule(format!(
                    "bad band [{}, {}] at minute {}",
                    e.x_min, e.x_max, e.start_minute
                )));
            }
        }
        Ok(Schedule { entries })
    }

    /// The cooling-season default: 25 °C upper bound from 06:00 to 22:00,
    /// 23 °C overnight, 22 °C lower bound throughout.
    pub fn default_cooling() -> Schedule {
        Schedule::new(vec![
            ScheduleEntry { start_minute: 0, x_min: 22.0, x_max: 23.0 },
            ScheduleEntry { start_minute: 6 * 60, x_min: 22.0, x_max: 25.0 },
            ScheduleEntry { start_minute: 22 * 60, x_min: 22.0, x_max: 23.0 },
        ])
        .expect("default schedule is valid")
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Band in force at an instant.
    pub fn band_at(&self, ts: NaiveDateTime) -> Band {
        let minute = ts.hour() * 60 + ts.minute();
        let e = self
            .entries
            .iter()
            .rev()
            .find(|e| e.start_minute <= minute)
            .unwrap_or_else(|| self.entries.last().expect("schedule is non-empty"));
        Band { x_min: e.x_min, x_max: e.x_max }
    }

    /// Bands a plan's steps are held to: the schedule evaluated at the end
    /// of each step.
    pub fn bands_for_plan(&self, plan: &RolloutPlan, start: NaiveDateTime) -> Vec<Band> {
        let mut bands = Vec::with_capacity(plan.total_steps());
        let mut at = start;
        for seg in &plan.segments {
            for _ in 0..seg.steps {
                at += chrono::Duration::minutes(seg.model.rate_minutes as i64);
                bands.push(self.band_at(at));
            }
        }
        bands
    }

    /// Parse the `time_of_day,x_min,x_max` CSV format (times as `HH:MM`).
    pub fn read_csv(path: &std::path::Path) -> Result<Schedule, MpcError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("time_of_day,x_min,x_max") => {}
            other => {
                return Err(MpcError::Schedule(format!(
                    "{}: expected header time_of_day,x_min,x_max, got {other:?}",
                    path.display()
                )));
            }
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| {
                MpcError::Schedule(format!("{}:{}: {what}", path.display(), i + 2))
            };
            let mut fields = line.split(',');
            let time = fields.next().ok_or_else(|| bad("missing time_of_day"))?;
            let x_min = fields
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad("bad x_min"))?;
            let x_max = fields
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad("bad x_max"))?;
            if fields.next().is_some() {
                return Err(bad("too many fields"));
            }
            let (h, m) = time
                .split_once(':')
                .and_then(|(h, m)| Some((h.parse::<u32>().ok()?, m.parse::<u32>().ok()?)))
                .filter(|&(h, m)| h < 24 && m < 60)
                .ok_or_else(|| bad("bad time_of_day, expected HH:MM"))?;
            entries.push(ScheduleEntry { start_minute: h * 60 + m, x_min, x_max });
        }
        Schedule::new(entries)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), MpcError> {
        let mut out = String::from("time_of_day,x_min,x_max\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{:02}:{:02},{},{}\n",
                e.start_minute / 60,
                e.start_minute % 60,
                e.x_min,
                e.x_max
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn constant_problem(x: f64, steps: usize) -> MpcProblem<FnDynamics<impl Fn(&[f64]) -> Vec<f64>>> {
        MpcProblem {
            dynamics: FnDynamics { steps, f: move |u: &[f64]| vec![x; u.len()] },
            bands: vec![Band { x_min: 22.0, x_max: 25.0 }; steps],
            r: 1.0,
            lambda: 100.0,
            u_min: -0.6,
            u_max: 0.0,
        }
    }

    #[test]
    fn slack_is_zero_inside_the_band() {
        let p = constant_problem(23.5, 3);
        let u = [-0.1, -0.2, 0.0];
        let s = eliminate_slack(&p, &u).unwrap();
        assert_eq!(s.eps, vec![0.0; 3]);
        let input_cost: f64 = u.iter().map(|v| v * v).sum();
        assert!((s.objective - input_cost).abs() < 1e-15);
    }

    #[test]
    fn slack_equals_the_violation_magnitude() {
        let p = constant_problem(25.5, 1);
        let s = eliminate_slack(&p, &[0.0]).unwrap();
        assert_eq!(s.eps, vec![0.5]);
        assert!((s.objective - 100.0 * 0.25).abs() < 1e-12);

        let p = constant_problem(21.0, 1);
        let s = eliminate_slack(&p, &[0.0]).unwrap();
        assert_eq!(s.eps, vec![1.0]); // lower side: 22 − 21
    }

    #[test]
    fn toy_parabola_slack_has_all_three_regimes() {
        let p = parabola_toy_problem();
        // Vertex: x = 1, a full Kelvin below the band.
        let s = eliminate_slack(&p, &[-0.5]).unwrap();
        assert_eq!(s.eps, vec![1.0]);
        // u = 0: x = 1.25 → lower violation 0.75.
        let s = eliminate_slack(&p, &[0.0]).unwrap();
        assert_eq!(s.eps, vec![0.75]);
        assert!((s.objective - 100.0 * 0.75 * 0.75).abs() < 1e-12);
        // Inside the band: x(0.7) = 2.44.
        let s = eliminate_slack(&p, &[0.7]).unwrap();
        assert_eq!(s.eps, vec![0.0]);
        // Far side: x(−3) = 7.25 → upper violation 3.25.
        let s = eliminate_slack(&p, &[-3.0]).unwrap();
        assert_eq!(s.eps, vec![3.25]);
        assert!((s.objective - (9.0 + 100.0 * 3.25 * 3.25)).abs() < 1e-10);
    }

    #[test]
    fn validation_rejects_malformed_problems() {
        let mut p = constant_problem(23.0, 2);
        p.u_min = 0.5;
        assert!(matches!(p.validate(), Err(MpcError::BadBounds { .. })));

        let mut p = constant_problem(23.0, 2);
        p.lambda = 0.0;
        assert!(matches!(p.validate(), Err(MpcError::BadWeights { .. })));

        let mut p = constant_problem(23.0, 2);
        p.bands.pop();
        assert!(matches!(p.validate(), Err(MpcError::BandLength { need: 2, got: 1 })));

        let mut p = constant_problem(23.0, 2);
        p.bands[1] = Band { x_min: 25.0, x_max: 22.0 };
        assert!(matches!(p.validate(), Err(MpcError::BadBand { step: 1 })));
    }

    #[test]
    fn non_finite_dynamics_abort() {
        let p = MpcProblem {
            dynamics: FnDynamics { steps: 1, f: |_: &[f64]| vec![f64::INFINITY] },
            bands: vec![Band { x_min: 22.0, x_max: 25.0 }],
            r: 1.0,
            lambda: 100.0,
            u_min: -0.6,
            u_max: 0.0,
        };
        assert!(matches!(eliminate_slack(&p, &[0.0]), Err(MpcError::NonFinite { .. })));
    }

    #[test]
    fn trivial_problem_keeps_the_input_at_zero() {
        let p = constant_problem(23.0, 5);
        let sol = solve(&p, &TrustRegionSolver::default(), None).unwrap();
        assert!(sol.converged);
        assert!(sol.u.iter().all(|&v| v.abs() <= 1e-3), "{:?}", sol.u);
        assert!(sol.objective <= 1e-5);
        assert_eq!(sol.eps, vec![0.0; 5]);
    }

    #[test]
    fn one_step_upper_violation_matches_a_grid_oracle() {
        // Monotone dynamics: x(u) = 26 + 4u on u ∈ [−0.6, 0]; the band top
        // is 25, so cooling fights the r·u² term.
        let p = MpcProblem {
            dynamics: FnDynamics { steps: 1, f: |u: &[f64]| vec![26.0 + 4.0 * u[0]] },
            bands: vec![Band { x_min: 22.0, x_max: 25.0 }],
            r: 1.0,
            lambda: 100.0,
            u_min: -0.6,
            u_max: 0.0,
        };
        let sol = solve(&p, &TrustRegionSolver::default(), None).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=100_000 {
            let u = -0.6 + 0.6 * i as f64 / 100_000.0;
            let obj = eliminate_slack(&p, &[u]).unwrap().objective;
            if obj < best.0 {
                best = (obj, u);
            }
        }
        assert!((sol.u[0] - best.1).abs() <= 1e-3, "solver {} grid {}", sol.u[0], best.1);
        assert!(sol.objective <= best.0 * 1.0001 + 1e-12);
        assert!(sol.converged);
    }

    #[test]
    fn warm_start_is_clamped_into_the_box() {
        let p = constant_problem(23.0, 2);
        let sol = solve(&p, &TrustRegionSolver::default(), Some(&[-5.0, 3.0])).unwrap();
        assert!(sol.u.iter().all(|&v| (-0.6..=0.0).contains(&v)));
    }

    #[test]
    fn schedule_lookup_wraps_and_switches() {
        let s = Schedule::default_cooling();
        let day = NaiveDate::from_ymd_opt(2023, 7, 10).unwrap();
        assert_eq!(s.band_at(day.and_hms_opt(3, 0, 0).unwrap()).x_max, 23.0);
        assert_eq!(s.band_at(day.and_hms_opt(6, 0, 0).unwrap()).x_max, 25.0);
        assert_eq!(s.band_at(day.and_hms_opt(21, 59, 0).unwrap()).x_max, 25.0);
        assert_eq!(s.band_at(day.and_hms_opt(22, 0, 0).unwrap()).x_max, 23.0);
        assert_eq!(s.band_at(day.and_hms_opt(23, 40, 0).unwrap()).x_min, 22.0);

        // No midnight entry: the last entry of the previous day applies.
        let night = Schedule::new(vec![
            ScheduleEntry { start_minute: 8 * 60, x_min: 22.0, x_max: 25.0 },
            ScheduleEntry { start_minute: 20 * 60, x_min: 21.0, x_max: 23.0 },
        ])
        .unwrap();
        assert_eq!(night.band_at(day.and_hms_opt(2, 0, 0).unwrap()).x_max, 23.0);
    }

    #[test]
    fn schedule_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schedule.csv");
        let s = Schedule::default_cooling();
        s.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "time_of_day,x_min,x_max\n00:00,22,23\n06:00,22,25\n22:00,22,23\n");
        assert_eq!(Schedule::read_csv(&path).unwrap(), s);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(Schedule::new(vec![]).is_err());
        assert!(Schedule::new(vec![
            ScheduleEntry { start_minute: 0, x_min: 25.0, x_max: 22.0 },
        ])
        .is_err());
        assert!(Schedule::new(vec![
            ScheduleEntry { start_minute: 0, x_min: 22.0, x_max: 25.0 },
            ScheduleEntry { start_minute: 0, x_min: 22.0, x_max: 23.0 },
        ])
        .is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time_of_day,x_min,x_max\n25:00,22,25\n").unwrap();
        assert!(Schedule::read_csv(&path).is_err());
    }
}
