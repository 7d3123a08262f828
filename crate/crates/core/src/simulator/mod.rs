//! A 2R2C thermal room model: synthetic stand-in for the real bedroom.
//!
//! Two lumped capacitances (room air, wall mass) exchange heat with ambient,
//! a neighbouring zone and each other through constant resistances; solar
//! gains enter through an effective aperture scaled by the blind state, and
//! the ceiling panels inject the (non-positive, cooling) control energy
//! directly into the room node. The model generates identification data,
//! serves as the closed-loop plant, and provides the hysteresis-thermostat
//! baseline the controller is compared against.
//!
//! The parameters are synthetic — chosen so that the 0.6 kWh-per-20-min
//! cooling capacity can hold the comfort band on an ordinary hot day but
//! not on the scripted high-wind day when the blinds open — and everything
//! is deterministic under a fixed seed.

mod run;

pub use run::{closed_loop_mpc, closed_loop_thermostat, LogRow, PerfectForecast, RunLog};

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::RawRecord;

/// Lumped thermal parameters. Capacitances in kWh/K, resistances in K/kW,
/// aperture in kW per (W/m²) of irradiation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomModel {
    pub c_room: f64,
    pub c_wall: f64,
    pub r_amb: f64,
    pub r_wall: f64,
    pub r_neighbor: f64,
    pub a_sol: f64,
    /// Fraction of solar gain admitted: blinds shut ≈ 0.15, open = 1.
    pub blind: f64,
}

impl Default for RoomModel {
    fn default() -> Self {
        RoomModel {
            c_room: 2.0,
            c_wall: 8.0,
            r_amb: 8.0,
            r_wall: 2.0,
            r_neighbor: 6.0,
            a_sol: 0.003,
            blind: BLIND_SHUT,
        }
    }
}

pub const BLIND_SHUT: f64 = 0.15;
pub const BLIND_OPEN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomState {
    pub t_room: f64,
    pub t_wall: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("room state became non-finite (t_room={t_room}, t_wall={t_wall})")]
    NonFiniteState { t_room: f64, t_wall: f64 },
    #[error("weather trace too short: step {step} beyond {len} records")]
    TraceExhausted { step: usize, len: usize },
    #[error(transparent)]
    Mpc(#[from] crate::mpc::MpcError),
    #[error("{0}")]
    BadTrace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One explicit-Euler step of length `dt_hours`. All couplings are read
/// from the pre-step state; `q_u` is the energy (kWh, ≤ 0 when cooling)
/// delivered over the step, so it enters without the `dt` factor.
pub fn step(
    model: &RoomModel,
    state: RoomState,
    t_amb: f64,
    t_neighbor: f64,
    q_sol: f64,
    q_u: f64,
    dt_hours: f64,
) -> Result<RoomState, SimError> {
    let flows = (t_amb - state.t_room) / model.r_amb
        + (state.t_wall - state.t_room) / model.r_wall
        + (t_neighbor - state.t_room) / model.r_neighbor
        + model.blind * model.a_sol * q_sol;
    let t_room = state.t_room + dt_hours / model.c_room * flows + q_u / model.c_room;
    let t_wall =
        state.t_wall + dt_hours / model.c_wall * ((state.t_room - state.t_wall) / model.r_wall);
    let next = RoomState { t_room, t_wall };
    if !t_room.is_finite() || !t_wall.is_finite() {
        return Err(SimError::NonFiniteState { t_room, t_wall });
    }
    Ok(next)
}

/// Exogenous conditions over one 20-minute step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherPoint {
    pub t_amb: f64,
    pub q_sol: f64,
    /// High-wind flag: the blinds are forced open while set.
    pub wind: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherTrace {
    pub start: NaiveDateTime,
    pub step_minutes: u32,
    pub points: Vec<WeatherPoint>,
}

impl WeatherTrace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.step_minutes as i64 * step as i64)
    }

    /// Write the `timestamp,T_amb,Q_sol,wind` CSV.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), SimError> {
        let mut out = String::from("timestamp,T_amb,Q_sol,wind\n");
        for (i, p) in self.points.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                crate::features::io::format_timestamp(self.timestamp(i)),
                p.t_amb,
                p.q_sol,
                u8::from(p.wind),
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<WeatherTrace, SimError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "timestamp,T_amb,Q_sol,wind")) => {}
            other => {
                return Err(SimError::BadTrace(format!(
                    "{}: expected header timestamp,T_amb,Q_sol,wind, got {:?}",
                    path.display(),
                    other.map(|(_, l)| l)
                )));
            }
        }
        let mut start = None;
        let mut prev: Option<NaiveDateTime> = None;
        let mut step_minutes = 0u32;
        let mut points = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad =
                |what: &str| SimError::BadTrace(format!("{}:{}: {what}", path.display(), i + 1));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let ts = crate::features::io::parse_timestamp(fields[0])
                .ok_or_else(|| bad("bad timestamp"))?;
            let t_amb: f64 = fields[1].parse().map_err(|_| bad("bad T_amb"))?;
            let q_sol: f64 = fields[2].parse().map_err(|_| bad("bad Q_sol"))?;
            let wind = match fields[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("wind must be 0 or 1")),
            };
            if let Some(p) = prev {
                let gap = (ts - p).num_minutes();
                if gap <= 0 {
                    return Err(bad("timestamps must increase"));
                }
                if step_minutes == 0 {
                    step_minutes = gap as u32;
                } else if gap as u32 != step_minutes {
                    return Err(bad("trace must be evenly spaced"));
                }
            } else {
                start = Some(ts);
            }
            prev = Some(ts);
            points.push(WeatherPoint { t_amb, q_sol, wind });
        }
        let start = start.ok_or_else(|| {
            SimError::BadTrace(format!("{}: trace has no rows", path.display()))
        })?;
        Ok(WeatherTrace {
            start,
            step_minutes: if step_minutes == 0 { 20 } else { step_minutes },
            points,
        })
    }
}

#[derive(Debug, Clone)]
pub struct WeatherConfig {
    pub days: usize,
    pub seed: u64,
    /// Day index (0-based) whose daylight hours get the high-wind flag.
    pub wind_day: Option<usize>,
    pub start: NaiveDateTime,
    pub t_amb_low: f64,
    pub t_amb_high: f64,
    pub q_sol_peak: f64,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        WeatherConfig {
            days: 5,
            seed: 0,
            wind_day: None,
            start: NaiveDate::from_ymd_opt(2023, 7, 3).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            t_amb_low: 20.0,
            t_amb_high: 32.0,
            q_sol_peak: 800.0,
        }
    }
}

/// Sinusoidal diurnal ambient (coolest 03:00, hottest 15:00) plus a daylight
/// half-sine of solar irradiation, with seeded noise on both.
pub fn generate_weather(cfg: &WeatherConfig) -> WeatherTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mid = 0.5 * (cfg.t_amb_low + cfg.t_amb_high);
    let amp = 0.5 * (cfg.t_amb_high - cfg.t_amb_low);
    let steps_per_day = 24 * 60 / 20;
    let mut points = Vec::with_capacity(cfg.days * steps_per_day);
    for day in 0..cfg.days {
        for s in 0..steps_per_day {
            let hour = s as f64 / 3.0;
            let t_amb = mid + amp * (std::f64::consts::TAU * (hour - 15.0) / 24.0).cos()
                + rng.random_range(-0.3..0.3);
            let sun = (std::f64::consts::PI * (hour - 6.0) / 14.0).sin();
            let q_sol = if (6.0..20.0).contains(&hour) {
                (cfg.q_sol_peak * sun * rng.random_range(0.92..1.0)).max(0.0)
            } else {
                0.0
            };
            let wind = cfg.wind_day == Some(day) && (8.0..20.0).contains(&hour);
            points.push(WeatherPoint { t_amb, q_sol, wind });
        }
    }
    WeatherTrace { start: cfg.start, step_minutes: 20, points }
}

/// Bang-bang cooling with a ±`hysteresis` dead band around the setpoint:
/// full cooling engages above `setpoint + hysteresis`, disengages below
/// `setpoint − hysteresis`, and the last decision holds in between.
#[derive(Debug, Clone)]
pub struct Thermostat {
    pub setpoint: f64,
    pub hysteresis: f64,
    /// Energy per step while cooling, kWh (≤ 0).
    pub u_full: f64,
    cooling: bool,
}

impl Thermostat {
    pub fn new(setpoint: f64) -> Thermostat {
        Thermostat { setpoint, hysteresis: 0.5, u_full: -0.6, cooling: false }
    }

    pub fn control(&mut self, t_room: f64) -> f64 {
        if t_room > self.setpoint + self.hysteresis {
            self.cooling = true;
        } else if t_room < self.setpoint - self.hysteresis {
            self.cooling = false;
        }
        if self.cooling {
            self.u_full
        } else {
            0.0
        }
    }
}

/// Identification-data excitation: `Thermostat` reproduces normal operation,
/// `Random` holds uniform cooling levels for 1–6 step blocks to cover the
/// input space.
#[derive(Debug, Clone)]
pub enum Excitation {
    Thermostat { setpoint: f64 },
    Random { seed: u64 },
}

struct RandomHold {
    rng: ChaCha8Rng,
    current: f64,
    remaining: usize,
}

impl RandomHold {
    fn new(seed: u64) -> RandomHold {
        RandomHold { rng: ChaCha8Rng::seed_from_u64(seed), current: 0.0, remaining: 0 }
    }

    fn next(&mut self) -> f64 {
        if self.remaining == 0 {
            self.current = self.rng.random_range(-0.6..0.0);
            self.remaining = self.rng.random_range(1..=6);
        }
        self.remaining -= 1;
        self.current
    }
}

/// Neighbouring-zone (living room) temperature profile: mildly diurnal,
/// warmest in the late afternoon. Logged as `T_l` and used as the plant's
/// neighbour coupling so the δT_l feature carries real signal.
pub fn neighbor_temperature(ts: NaiveDateTime) -> f64 {
    let hour = ts.hour() as f64 + ts.minute() as f64 / 60.0;
    23.0 + 1.2 * (std::f64::consts::TAU * (hour - 17.0) / 24.0).cos()
}

/// Simulate the plant over the whole weather trace at 20-minute steps and
/// emit one raw record per step after `warm_up_steps`. Records carry the
/// pre-step states and the flows over the step, matching the measurement
/// convention of the feature builder.
pub fn generate_dataset(
    model: &RoomModel,
    weather: &WeatherTrace,
    excitation: &Excitation,
    warm_up_steps: usize,
) -> Result<Vec<RawRecord>, SimError> {
    let dt_hours = weather.step_minutes as f64 / 60.0;
    let mut state = RoomState { t_room: 23.0, t_wall: 23.0 };
    let mut thermostat = match excitation {
        Excitation::Thermostat { setpoint } => Some(Thermostat::new(*setpoint)),
        Excitation::Random { .. } => None,
    };
    let mut random = match excitation {
        Excitation::Random { seed } => Some(RandomHold::new(*seed)),
        Excitation::Thermostat { .. } => None,
    };
    let mut out = Vec::with_capacity(weather.len().saturating_sub(warm_up_steps));
    let mut plant = model.clone();
    for (i, p) in weather.points.iter().enumerate() {
        let ts = weather.timestamp(i);
        let t_l = neighbor_temperature(ts);
        let q_u = match (&mut thermostat, &mut random) {
            (Some(t), _) => t.control(state.t_room),
            (_, Some(r)) => r.next(),
            _ => unreachable!(),
        };
        if i >= warm_up_steps {
            out.push(RawRecord {
                timestamp: ts,
                t_br: state.t_room,
                t_l,
                t_amb: p.t_amb,
                q_sol: p.q_sol,
                q_u,
            });
        }
        plant.blind = if p.wind { BLIND_OPEN } else { model.blind };
        state = step(&plant, state, p.t_amb, t_l, p.q_sol, q_u, dt_hours)?;
    }
    Ok(out)
}
