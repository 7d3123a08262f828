//! Closed-loop drivers: the plant stepped under either the MPC controller
//! or the bang-bang thermostat baseline, with a per-step log rich enough
//! to score comfort, energy, and solver health afterwards.

use chrono::NaiveDateTime;

use super::{
    neighbor_temperature, step, RoomModel, RoomState, SimError, Thermostat, WeatherTrace,
    BLIND_OPEN,
};
use crate::features::io::{format_timestamp, parse_timestamp};
use crate::model::TrainedModel;
use crate::mpc::{
    ControlDecision, ControllerConfig, Forecaster, Measurement, MpcController, Schedule,
};

/// A forecaster with direct access to the weather trace the plant will
/// actually see — the idealization that isolates controller quality from
/// forecast quality.
pub struct PerfectForecast<'a> {
    trace: &'a WeatherTrace,
}

impl<'a> PerfectForecast<'a> {
    pub fn new(trace: &'a WeatherTrace) -> PerfectForecast<'a> {
        PerfectForecast { trace }
    }

    fn point(&self, ts: NaiveDateTime) -> (f64, f64) {
        let step = self.trace.step_minutes as i64;
        let idx = (ts - self.trace.start).num_minutes().div_euclid(step);
        let idx = idx.clamp(0, self.trace.len() as i64 - 1) as usize;
        let p = self.trace.points[idx];
        (p.t_amb, p.q_sol)
    }
}

impl Forecaster for PerfectForecast<'_> {
    fn forecast(&self, ts: NaiveDateTime, minutes: u32) -> (f64, f64) {
        let slots = (minutes / self.trace.step_minutes).max(1);
        let mut t_amb = 0.0;
        let mut q_sol = 0.0;
        for i in 0..slots {
            let at = ts + chrono::Duration::minutes((i * self.trace.step_minutes) as i64);
            let (t, q) = self.point(at);
            t_amb += t;
            q_sol += q;
        }
        (t_amb / slots as f64, q_sol / slots as f64)
    }
}

/// One closed-loop step: the state the controller saw, what it decided,
/// and what it predicted. Prediction fields are empty on thermostat rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub timestamp: NaiveDateTime,
    /// Room/wall state at the *start* of the step.
    pub t_room: f64,
    pub t_wall: f64,
    pub t_amb: f64,
    pub q_sol: f64,
    pub wind: bool,
    /// Comfort band in force at this instant.
    pub x_min: f64,
    pub x_max: f64,
    /// Applied input, kWh.
    pub u: f64,
    pub fallback: bool,
    pub converged: Option<bool>,
    pub evaluations: usize,
    pub wall_ms: f64,
    pub objective: Option<f64>,
    pub x_pred: Vec<f64>,
    pub eps: Vec<f64>,
}

/// A full closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub step_minutes: u32,
    /// Number of predicted-state columns per row (0 for thermostat runs).
    pub horizon_steps: usize,
}

impl RunLog {
    /// Total cooling energy, kWh (inputs are energies per step).
    pub fn energy_kwh(&self) -> f64 {
        self.rows.iter().map(|r| r.u.abs()).sum()
    }

    /// Comfort violation integral in K·h: instantaneous band excursion of
    /// the measured room temperature, left-endpoint rule over the steps.
    pub fn violation_kh(&self) -> f64 {
        self.violation(|_| true)
    }

    /// Violation integral with wind-flagged steps excluded — excursions the
    /// controller cannot prevent while storm protection forces the blinds
    /// open are scored separately.
    pub fn violation_kh_no_wind(&self) -> f64 {
        self.violation(|r| !r.wind)
    }

    fn violation(&self, keep: impl Fn(&LogRow) -> bool) -> f64 {
        let dt = self.step_minutes as f64 / 60.0;
        self.rows
            .iter()
            .filter(|r| keep(r))
            .map(|r| (r.t_room - r.x_max).max(r.x_min - r.t_room).max(0.0) * dt)
            .sum()
    }

    /// Mean and max solver wall time over non-fallback rows, ms.
    pub fn solve_ms(&self) -> Option<(f64, f64)> {
        let solved: Vec<f64> =
            self.rows.iter().filter(|r| !r.fallback).map(|r| r.wall_ms).collect();
        if solved.is_empty() {
            return None;
        }
        let mean = solved.iter().sum::<f64>() / solved.len() as f64;
        let max = solved.iter().fold(0.0f64, |a, &b| a.max(b));
        Some((mean, max))
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), SimError> {
        let mut header = vec![
            "timestamp".into(),
            "T_room".into(),
            "T_wall".into(),
            "T_amb".into(),
            "Q_sol".into(),
            "wind".into(),
            "x_min".into(),
            "x_max".into(),
            "u".into(),
            "fallback".into(),
            "converged".into(),
            "evaluations".into(),
            "wall_ms".into(),
            "objective".into(),
        ];
        for k in 1..=self.horizon_steps {
            header.push(format!("x_pred_{k}"));
        }
        for k in 1..=self.horizon_steps {
            header.push(format!("eps_{k}"));
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                format_timestamp(r.timestamp),
                format!("{}", r.t_room),
                format!("{}", r.t_wall),
                format!("{}", r.t_amb),
                format!("{}", r.q_sol),
                (r.wind as u8).to_string(),
                format!("{}", r.x_min),
                format!("{}", r.x_max),
                format!("{}", r.u),
                (r.fallback as u8).to_string(),
                r.converged.map(|c| (c as u8).to_string()).unwrap_or_default(),
                r.evaluations.to_string(),
                format!("{}", r.wall_ms),
                r.objective.map(|o| format!("{o}")).unwrap_or_default(),
            ];
            for k in 0..self.horizon_steps {
                rec.push(r.x_pred.get(k).map(|x| format!("{x}")).unwrap_or_default());
            }
            for k in 0..self.horizon_steps {
                rec.push(r.eps.get(k).map(|e| format!("{e}")).unwrap_or_default());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<RunLog, SimError> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        let horizon_steps =
            header.iter().filter(|h| h.starts_with("x_pred_")).count();
        let base = 14;
        if header.len() != base + 2 * horizon_steps {
            return Err(SimError::BadTrace(format!(
                "log header has {} columns, expected {}",
                header.len(),
                base + 2 * horizon_steps
            )));
        }
        let bad = |what: &str| SimError::BadTrace(format!("log: bad {what}"));
        let mut rows = Vec::new();
        let mut timestamps: Vec<NaiveDateTime> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            let num = |i: usize| field(i).parse::<f64>().map_err(|_| bad(header.get(i).unwrap_or("field")));
            let opt_num = |i: usize| -> Result<Option<f64>, SimError> {
                if field(i).is_empty() { Ok(None) } else { Ok(Some(num(i)?)) }
            };
            let series = |from: usize| -> Result<Vec<f64>, SimError> {
                (from..from + horizon_steps).map(num).collect()
            };
            let timestamp = parse_timestamp(field(0)).ok_or_else(|| bad("timestamp"))?;
            timestamps.push(timestamp);
            let empty_pred = field(base).is_empty();
            rows.push(LogRow {
                timestamp,
                t_room: num(1)?,
                t_wall: num(2)?,
                t_amb: num(3)?,
                q_sol: num(4)?,
                wind: field(5) == "1",
                x_min: num(6)?,
                x_max: num(7)?,
                u: num(8)?,
                fallback: field(9) == "1",
                converged: match field(10) {
                    "" => None,
                    "1" => Some(true),
                    "0" => Some(false),
                    _ => return Err(bad("converged")),
                },
                evaluations: field(11).parse().map_err(|_| bad("evaluations"))?,
                wall_ms: num(12)?,
                objective: opt_num(13)?,
                x_pred: if horizon_steps > 0 && !empty_pred { series(base)? } else { Vec::new() },
                eps: if horizon_steps > 0 && !empty_pred {
                    series(base + horizon_steps)?
                } else {
                    Vec::new()
                },
            });
        }
        let step_minutes = match timestamps.get(..2) {
            Some([a, b]) => (*b - *a).num_minutes().max(1) as u32,
            _ => 20,
        };
        Ok(RunLog { rows, step_minutes, horizon_steps })
    }
}

fn csv_err(e: csv::Error) -> SimError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SimError::Io(io),
        other => SimError::BadTrace(format!("{other:?}")),
    }
}

/// Run the plant under the hysteresis thermostat for the whole trace.
/// The setpoint tracks the schedule: switch-on sits exactly at the upper
/// band edge.
pub fn closed_loop_thermostat(
    plant: &RoomModel,
    weather: &WeatherTrace,
    schedule: &Schedule,
) -> Result<RunLog, SimError> {
    let mut thermostat = Thermostat::new(0.0);
    let mut state = RoomState { t_room: 23.0, t_wall: 23.0 };
    let dt_hours = weather.step_minutes as f64 / 60.0;
    let mut rows = Vec::with_capacity(weather.len());
    for i in 0..weather.len() {
        let ts = weather.timestamp(i);
        let p = weather.points[i];
        let band = schedule.band_at(ts);
        thermostat.setpoint = band.x_max - thermostat.hysteresis;
        let u = thermostat.control(state.t_room);
        rows.push(LogRow {
            timestamp: ts,
            t_room: state.t_room,
            t_wall: state.t_wall,
            t_amb: p.t_amb,
            q_sol: p.q_sol,
            wind: p.wind,
            x_min: band.x_min,
            x_max: band.x_max,
            u,
            fallback: true,
            converged: None,
            evaluations: 0,
            wall_ms: 0.0,
            objective: None,
            x_pred: Vec::new(),
            eps: Vec::new(),
        });
        state = advance(plant, &state, ts, &p, u, dt_hours)?;
    }
    Ok(RunLog { rows, step_minutes: weather.step_minutes, horizon_steps: 0 })
}

/// Run the plant under the MPC controller. The first `warm_up_steps` steps
/// use the thermostat rule while the measurement buffer fills; every step,
/// warm-up included, feeds both the controller's buffer and the forecaster.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_mpc(
    plant: &RoomModel,
    weather: &WeatherTrace,
    fine: &TrainedModel,
    coarse: &TrainedModel,
    schedule: &Schedule,
    cfg: &ControllerConfig,
    forecaster: &mut dyn Forecaster,
    warm_up_steps: usize,
) -> Result<RunLog, SimError> {
    if weather.step_minutes != fine.rate_minutes {
        return Err(SimError::BadTrace(format!(
            "weather cadence {} min does not match the fine model's {} min",
            weather.step_minutes, fine.rate_minutes
        )));
    }
    let horizon_steps = cfg.fine_steps + cfg.coarse_steps;
    let mut controller = MpcController::new(fine, coarse, schedule.clone(), cfg.clone())?;
    let mut thermostat = Thermostat::new(0.0);
    thermostat.u_full = cfg.u_min;
    let mut state = RoomState { t_room: 23.0, t_wall: 23.0 };
    let mut q_sol_prev = 0.0;
    let dt_hours = weather.step_minutes as f64 / 60.0;
    let mut rows = Vec::with_capacity(weather.len());
    for i in 0..weather.len() {
        let ts = weather.timestamp(i);
        let p = weather.points[i];
        let t_l = neighbor_temperature(ts);
        let m = Measurement {
            timestamp: ts,
            t_br: state.t_room,
            t_l,
            t_amb: p.t_amb,
            q_sol_prev,
        };
        forecaster.observe(&m);
        controller.push_measurement(m);
        let band = schedule.band_at(ts);
        let decision = if i < warm_up_steps {
            thermostat.setpoint = band.x_max - thermostat.hysteresis;
            let u0 = thermostat.control(state.t_room).clamp(cfg.u_min, cfg.u_max);
            ControlDecision { timestamp: ts, u0, fallback: true, solution: None }
        } else {
            controller.step(&*forecaster)?
        };
        let (converged, evaluations, wall_ms, objective, x_pred, eps) = match &decision.solution {
            Some(s) => (
                Some(s.converged),
                s.evaluations,
                s.wall_ms,
                Some(s.objective),
                s.x.clone(),
                s.eps.clone(),
            ),
            None => (None, 0, 0.0, None, Vec::new(), Vec::new()),
        };
        rows.push(LogRow {
            timestamp: ts,
            t_room: state.t_room,
            t_wall: state.t_wall,
            t_amb: p.t_amb,
            q_sol: p.q_sol,
            wind: p.wind,
            x_min: band.x_min,
            x_max: band.x_max,
            u: decision.u0,
            fallback: decision.fallback,
            converged,
            evaluations,
            wall_ms,
            objective,
            x_pred,
            eps,
        });
        state = advance(plant, &state, ts, &p, decision.u0, dt_hours)?;
        q_sol_prev = p.q_sol;
    }
    Ok(RunLog { rows, step_minutes: weather.step_minutes, horizon_steps })
}

/// One plant step with the storm rule applied: wind forces the blinds open.
fn advance(
    plant: &RoomModel,
    state: &RoomState,
    ts: NaiveDateTime,
    p: &super::WeatherPoint,
    u: f64,
    dt_hours: f64,
) -> Result<RoomState, SimError> {
    let effective = if p.wind {
        RoomModel { blind: BLIND_OPEN, ..plant.clone() }
    } else {
        plant.clone()
    };
    step(&effective, *state, p.t_amb, neighbor_temperature(ts), p.q_sol, u, dt_hours)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::features::{Y_DIM, YTILDE_DIM, Y_DT_AMB, Y_QU, YT_QSOL_K};
    use crate::icnn::{FicnnLayer, FicnnParams, IcnnParams, Mode};
    use crate::linalg::Mat;
    use crate::model::ModelFamily;
    use crate::norm::Normalizer;
    use crate::simulator::{generate_weather, WeatherConfig};
    use tempfile::tempdir;

    /// Affine single-layer model roughly matching the plant's per-step
    /// sensitivities at the given rate.
    fn physics_flavored_model(rate: u32) -> TrainedModel {
        let steps = rate as f64 / 20.0;
        let mut row = vec![0.0; Y_DIM + YTILDE_DIM];
        row[Y_DT_AMB] = 0.0208 * steps;
        row[Y_QU] = 0.5;
        row[Y_DIM + YT_QSOL_K] = 7.5e-5 * steps;
        TrainedModel {
            family: ModelFamily::FicnnMpc,
            rate_minutes: rate,
            params: IcnnParams::Ficnn(FicnnParams {
                mode: Mode::Mpc,
                input_dim: Y_DIM + YTILDE_DIM,
                layers: vec![FicnnLayer {
                    wz: None,
                    wy: Mat::from_rows(&[row]),
                    b: vec![0.0],
                    g: Activation::Identity,
                }],
            }),
            norm: Normalizer::identity(Y_DIM, YTILDE_DIM),
        }
    }

    fn calm_weather(days: usize) -> WeatherTrace {
        generate_weather(&WeatherConfig { days, ..WeatherConfig::default() })
    }

    #[test]
    fn thermostat_baseline_holds_the_band_on_a_calm_day() {
        let plant = RoomModel::default();
        let weather = calm_weather(2);
        let log = closed_loop_thermostat(&plant, &weather, &Schedule::default_cooling()).unwrap();
        assert_eq!(log.rows.len(), weather.len());
        for r in &log.rows {
            assert!(r.t_room.is_finite() && (19.0..27.0).contains(&r.t_room), "{:?}", r);
            assert!(r.u == 0.0 || r.u == -0.6, "bang-bang only, got {}", r.u);
        }
        assert!(log.energy_kwh() > 0.0);
        // A reactive thermostat cannot pre-cool, so the 22:00 band
        // tightening always produces a violation transient; away from band
        // changes it holds the band to within its switching overshoot.
        let mut steady = 0.0;
        for i in 6..log.rows.len() {
            let r = &log.rows[i];
            let settled = log.rows[i - 6..=i]
                .iter()
                .all(|p| p.x_max == r.x_max && p.x_min == r.x_min);
            if settled {
                steady += (r.t_room - r.x_max).max(r.x_min - r.t_room).max(0.0) / 3.0;
            }
        }
        assert!(steady < 0.3, "steady-band violation {steady}");
        assert!(log.violation_kh() < 4.0, "violation {}", log.violation_kh());
    }

    #[test]
    fn mpc_loop_runs_and_beats_the_violation_budget() {
        let plant = RoomModel::default();
        let weather = calm_weather(2);
        let fine = physics_flavored_model(20);
        let coarse = physics_flavored_model(180);
        let schedule = Schedule::default_cooling();
        let mut forecaster = PerfectForecast::new(&weather);
        let log = closed_loop_mpc(
            &plant,
            &weather,
            &fine,
            &coarse,
            &schedule,
            &ControllerConfig::default(),
            &mut forecaster,
            9,
        )
        .unwrap();
        assert_eq!(log.rows.len(), weather.len());
        assert_eq!(log.horizon_steps, 5);
        for (i, r) in log.rows.iter().enumerate() {
            assert!((-0.6..=0.0).contains(&r.u), "row {i}: u {}", r.u);
            if i < 9 {
                assert!(r.fallback);
            } else {
                assert!(!r.fallback, "row {i} fell back");
                assert_eq!(r.x_pred.len(), 5);
            }
        }
        let solved = log.rows.iter().filter(|r| !r.fallback);
        let converged = solved.clone().filter(|r| r.converged == Some(true)).count();
        assert!(
            converged * 10 >= solved.count() * 8,
            "too few converged solves: {converged}"
        );
        assert!(log.energy_kwh() > 0.0);
        assert!(log.violation_kh_no_wind() < 3.0, "violation {}", log.violation_kh_no_wind());
    }

    #[test]
    fn perfect_forecast_averages_the_trace() {
        let mut weather = calm_weather(1);
        for (i, p) in weather.points.iter_mut().enumerate() {
            p.t_amb = i as f64;
            p.q_sol = 10.0 * i as f64;
        }
        let f = PerfectForecast::new(&weather);
        let ts = weather.timestamp(3);
        assert_eq!(f.forecast(ts, 20), (3.0, 30.0));
        // Three-slot window: mean of points 3, 4, 5.
        assert_eq!(f.forecast(ts, 60), (4.0, 40.0));
        // Past the end of the trace the last point holds.
        let end = weather.timestamp(weather.len() - 1) + chrono::Duration::minutes(200);
        assert_eq!(f.forecast(end, 20), (71.0, 710.0));
    }

    #[test]
    fn run_log_survives_a_csv_round_trip() {
        let plant = RoomModel::default();
        let weather = calm_weather(1);
        let fine = physics_flavored_model(20);
        let coarse = physics_flavored_model(180);
        let mut forecaster = PerfectForecast::new(&weather);
        let log = closed_loop_mpc(
            &plant,
            &weather,
            &fine,
            &coarse,
            &Schedule::default_cooling(),
            &ControllerConfig::default(),
            &mut forecaster,
            9,
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let back = RunLog::read_csv(&path).unwrap();
        assert_eq!(back, log);

        let thermo =
            closed_loop_thermostat(&plant, &weather, &Schedule::default_cooling()).unwrap();
        let path = dir.path().join("thermo.csv");
        thermo.write_csv(&path).unwrap();
        assert_eq!(RunLog::read_csv(&path).unwrap(), thermo);
    }
}

