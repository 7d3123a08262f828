//! Derivative-free box-constrained minimization.
//!
//! The bundled solver is a linear-surrogate trust-region method in the
//! COBYLA family: estimate a gradient from single-sided finite differences
//! at the trust radius, minimize the linear model over the intersection of
//! the box and the radius (which for an ∞-norm region is a simple clamped
//! step), and grow or shrink the radius on the usual predicted-versus-actual
//! reduction test. No derivatives of the dynamics are ever needed, which is
//! what makes it usable on rolled-out network predictions, and the slack
//! objective is C¹ (squared hinges), so the finite-difference surrogate is
//! well behaved.

use super::MpcError;

/// A bound-constrained derivative-free minimizer. `objective` may fail
/// (non-finite dynamics abort the solve); implementations must stay inside
/// `[lower, upper]` and be deterministic.
pub trait Solver {
    fn minimize(
        &self,
        objective: &mut dyn FnMut(&[f64]) -> Result<f64, MpcError>,
        lower: &[f64],
        upper: &[f64],
        start: &[f64],
    ) -> Result<SolverRun, MpcError>;
}

#[derive(Debug, Clone)]
pub struct SolverRun {
    pub u: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
    /// True when the trust region collapsed below the termination radius;
    /// false when the evaluation budget ran out first.
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Initial (and maximum) trust radius, in input units.
    pub initial_radius: f64,
    /// Radius below which the search is declared converged.
    pub min_radius: f64,
    /// Total objective-evaluation budget.
    pub max_evals: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { initial_radius: 0.1, min_radius: 1e-4, max_evals: 500 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrustRegionSolver {
    pub cfg: SolverConfig,
}

impl TrustRegionSolver {
    pub fn new(cfg: SolverConfig) -> TrustRegionSolver {
        TrustRegionSolver { cfg }
    }
}

impl Solver for TrustRegionSolver {
    fn minimize(
        &self,
        objective: &mut dyn FnMut(&[f64]) -> Result<f64, MpcError>,
        lower: &[f64],
        upper: &[f64],
        start: &[f64],
    ) -> Result<SolverRun, MpcError> {
        let n = start.len();
        assert!(n > 0, "cannot minimize over zero variables");
        assert!(lower.len() == n && upper.len() == n, "bound/start dimension mismatch");
        debug_assert!(lower.iter().zip(upper).all(|(l, u)| l <= u));

        let clamp = |v: f64, i: usize| v.clamp(lower[i], upper[i]);
        let mut x: Vec<f64> = start.iter().enumerate().map(|(i, &v)| clamp(v, i)).collect();
        let mut evals = 0usize;
        let mut eval = |u: &[f64], evals: &mut usize| -> Result<f64, MpcError> {
            *evals += 1;
            objective(u)
        };

        let mut fx = eval(&x, &mut evals)?;
        let mut best = (x.clone(), fx);
        let mut rho = self.cfg.initial_radius;
        let mut converged = false;
        let mut streak = 0usize;
        // Last successful displacement, retried with doubling before the
        // next gradient estimate (the Hooke–Jeeves pattern move). Pure
        // steepest descent creeps through ill-conditioned valleys at one
        // radius per iteration and exhausts the budget; the pattern move
        // covers the same ground in logarithmically many evaluations.
        let mut last_disp: Option<Vec<f64>> = None;

        'outer: while rho >= self.cfg.min_radius {
            // Pattern phase: keep doubling the previous success while it
            // pays. Costs a single evaluation when it does not.
            if let Some(mut d) = last_disp.take() {
                loop {
                    if evals >= self.cfg.max_evals {
                        break 'outer;
                    }
                    let cand: Vec<f64> = (0..n).map(|i| clamp(x[i] + d[i], i)).collect();
                    if cand == x {
                        break;
                    }
                    let fc = eval(&cand, &mut evals)?;
                    if fc < best.1 {
                        best = (cand.clone(), fc);
                    }
                    if fc < fx - 1e-10 * (1.0 + fx.abs()) {
                        d = (0..n).map(|i| 2.0 * (cand[i] - x[i])).collect();
                        x = cand;
                        fx = fc;
                    } else {
                        break;
                    }
                }
            }

            // Surrogate phase: one-sided difference along each coordinate,
            // probing into whichever direction has box room.
            let mut g = vec![0.0; n];
            let mut probe_best: Option<(Vec<f64>, f64)> = None;
            for i in 0..n {
                let room_up = upper[i] - x[i];
                let room_dn = x[i] - lower[i];
                let (sign, h) =
                    if room_up >= room_dn { (1.0, room_up.min(rho)) } else { (-1.0, room_dn.min(rho)) };
                if h <= 0.0 {
                    continue; // dimension pinched by the box
                }
                if evals >= self.cfg.max_evals {
                    break 'outer;
                }
                let mut xp = x.clone();
                xp[i] += sign * h;
                let fp = eval(&xp, &mut evals)?;
                if fp < best.1 {
                    best = (xp.clone(), fp);
                }
                if probe_best.as_ref().is_none_or(|(_, f)| fp < *f) {
                    probe_best = Some((xp, fp));
                }
                g[i] = sign * (fp - fx) / h;
            }

            let g_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if g_inf == 0.0 {
                rho *= 0.5;
                continue;
            }

            // Linear model over the ∞-norm region: step against the
            // gradient, scaled so the largest component moves a full radius,
            // then clamped back into the box.
            let cand: Vec<f64> =
                (0..n).map(|i| clamp(x[i] - rho * g[i] / g_inf, i)).collect();
            let predicted: f64 = (0..n).map(|i| g[i] * (cand[i] - x[i])).sum();
            if cand == x || predicted >= 0.0 {
                rho *= 0.5;
                continue;
            }
            if evals >= self.cfg.max_evals {
                break;
            }
            let fc = eval(&cand, &mut evals)?;
            if fc < best.1 {
                best = (cand.clone(), fc);
            }

            let actual = fx - fc;
            // Below this, "improvement" is rounding noise; counting it as
            // success would keep the radius alive forever near an optimum.
            let floor = 1e-10 * (1.0 + fx.abs());
            if actual > -0.1 * predicted && actual > floor {
                // Sufficient decrease; take the step, and grow the region
                // only after the model has been trustworthy twice in a row —
                // expanding on every good step just undoes the shrinks and
                // zigzags around interior optima.
                if actual > -0.7 * predicted {
                    streak += 1;
                    if streak >= 2 {
                        rho = (rho * 2.0).min(self.cfg.initial_radius);
                    }
                } else {
                    streak = 0;
                }
                last_disp = Some((0..n).map(|i| cand[i] - x[i]).collect());
                x = cand;
                fx = fc;
            } else if let Some((xp, fp)) = probe_best.filter(|(_, fp)| *fp < fx - floor) {
                // The line step failed but a probe already found something
                // better — free progress, keep the radius.
                streak = 0;
                last_disp = Some((0..n).map(|i| xp[i] - x[i]).collect());
                x = xp;
                fx = fp;
            } else {
                streak = 0;
                rho *= 0.5;
            }
        }
        if rho < self.cfg.min_radius {
            converged = true;
        }
        let (u, objective) = best;
        Ok(SolverRun { u, objective, evaluations: evals, converged })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        f: impl Fn(&[f64]) -> f64,
        lower: &[f64],
        upper: &[f64],
        start: &[f64],
    ) -> SolverRun {
        TrustRegionSolver::default()
            .minimize(&mut |u| Ok(f(u)), lower, upper, start)
            .unwrap()
    }

    #[test]
    fn quadratic_bowl_inside_the_box() {
        let sol = run(
            |u| (u[0] - 0.3).powi(2) + 2.0 * (u[1] + 0.2).powi(2),
            &[-1.0, -1.0],
            &[1.0, 1.0],
            &[0.9, 0.9],
        );
        assert!(sol.converged);
        assert!((sol.u[0] - 0.3).abs() < 1e-3, "{:?}", sol.u);
        assert!((sol.u[1] + 0.2).abs() < 1e-3, "{:?}", sol.u);
    }

    #[test]
    fn minimum_outside_the_box_lands_on_the_boundary() {
        let sol = run(|u| (u[0] - 5.0).powi(2), &[-1.0], &[1.0], &[-0.5]);
        assert!(sol.converged);
        assert!((sol.u[0] - 1.0).abs() < 1e-9, "{:?}", sol.u);
    }

    #[test]
    fn kinked_objectives_still_converge() {
        // C⁰ kink away from the minimum, squared-hinge kinks near it — the
        // shape slack elimination produces.
        let f = |u: &[f64]| {
            (u[0] - 0.25).abs() + 100.0 * (u[1].max(0.0)).powi(2) + u[1] * u[1] * 0.1
        };
        let sol = run(f, &[-1.0, -1.0], &[1.0, 1.0], &[-0.9, 0.8]);
        assert!(sol.converged);
        assert!((sol.u[0] - 0.25).abs() < 2e-3, "{:?}", sol.u);
        assert!(sol.u[1] <= 1e-3, "{:?}", sol.u);
    }

    #[test]
    fn exhausted_budget_returns_best_iterate_unconverged() {
        let cfg = SolverConfig { max_evals: 8, ..SolverConfig::default() };
        let sol = TrustRegionSolver::new(cfg)
            .minimize(
                &mut |u| Ok((u[0] - 0.3).powi(2) + (u[1] - 0.3).powi(2)),
                &[-1.0, -1.0],
                &[1.0, 1.0],
                &[-1.0, -1.0],
            )
            .unwrap();
        assert!(!sol.converged);
        assert!(sol.evaluations <= 8);
        // Still made progress from the corner.
        assert!(sol.objective < 2.0 * 1.3 * 1.3);
    }

    #[test]
    fn start_outside_the_box_is_clamped() {
        let sol = run(|u| u[0] * u[0], &[-1.0], &[1.0], &[7.0]);
        assert!(sol.u[0].abs() < 1e-3);
    }

    #[test]
    fn errors_from_the_objective_propagate() {
        let err = TrustRegionSolver::default().minimize(
            &mut |u| {
                if u[0] < -0.5 {
                    Err(MpcError::NonFinite { u: u.to_vec() })
                } else {
                    Ok(u[0] * u[0])
                }
            },
            &[-1.0],
            &[1.0],
            &[-0.9],
        );
        assert!(matches!(err, Err(MpcError::NonFinite { .. })));
    }

    #[test]
    fn an_ill_conditioned_valley_is_solved_near_optimally() {
        // Cumulative dynamics with a stiff hinge make a narrow valley whose
        // floor is two orders of magnitude softer than its walls — the case
        // that defeats plain steepest descent within any reasonable budget.
        // At the symmetric optimum u_k = −10/63 the objective is 8/63.
        let drifts = [0.1, 0.1, 0.1, 0.8, 0.8];
        let mut f = |u: &[f64]| -> Result<f64, MpcError> {
            let mut x = 23.5;
            let mut obj = 0.0;
            for (k, d) in drifts.iter().enumerate() {
                x += d + 0.5 * u[k];
                let e = (x - 25.0f64).max(22.0 - x).max(0.0);
                obj += u[k] * u[k] + 100.0 * e * e;
            }
            Ok(obj)
        };
        let run = TrustRegionSolver::default()
            .minimize(&mut f, &[-0.6; 5], &[0.0; 5], &[0.0; 5])
            .unwrap();
        let optimum = 8.0 / 63.0;
        assert!(
            run.objective <= optimum * 1.01,
            "objective {} vs optimum {optimum}",
            run.objective
        );
        assert!(run.evaluations <= 500);
        assert!(run.converged, "budget exhausted after {} evals", run.evaluations);
    }
}

