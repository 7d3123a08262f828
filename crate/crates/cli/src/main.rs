//! `icnn-mpc` — command-line front end for the convex-surrogate MPC
//! pipeline: synthetic data generation, model fitting, cross-validated
//! evaluation, convexity audits, closed-loop runs and SVG reports.
//!
//! Every command reads one TOML config (all fields optional), applies the
//! shared flag overrides, and echoes the fully-resolved configuration into
//! the output directory before doing anything else, so each artifact
//! directory documents how it was produced.

mod config;
mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use icnn_mpc::features::io::read_records_csv;
use icnn_mpc::features::{self, RATE_COARSE_MIN, RATE_FINE_MIN};
use icnn_mpc::model::ModelPair;
use icnn_mpc::mpc::{ControllerConfig, Forecaster, PersistenceForecast, Schedule};
use icnn_mpc::rollout::{audit_convexity, AuditConfig, RolloutPlan};
use icnn_mpc::simulator::{
    closed_loop_mpc, closed_loop_thermostat, generate_dataset, generate_weather, Excitation,
    PerfectForecast, RoomModel, RunLog, WeatherConfig, WeatherTrace,
};
use icnn_mpc::training::kfold::{kfold_evaluate, Horizon, KfoldConfig};
use icnn_mpc::training::{train, TrainConfig};
use icnn_mpc::{ModelFamily, TrainedModel};

use config::Config;

#[derive(Parser)]
#[command(
    name = "icnn-mpc",
    version,
    about = "Convex neural surrogates and soft-constrained MPC for room climate control"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed of every pipeline stage at once.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to one model family, e.g. `ficnn-mpc`.
    #[arg(long)]
    family: Option<String>,
    /// Escalate audit failures to a nonzero exit code.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate weather and room physics into an identification dataset.
    GenData(CommonArgs),
    /// Fit the 20-minute and 180-minute surrogate models on a dataset.
    Train(CommonArgs),
    /// Month-fold cross-validation across model families and horizons.
    Evaluate(CommonArgs),
    /// Sampling audit of multi-step convexity and input monotonicity.
    Audit(CommonArgs),
    /// Closed-loop MPC run against the simulated room, with a thermostat baseline.
    MpcRun(CommonArgs),
    /// Render a closed-loop run log into a self-contained SVG report.
    Report(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type CmdFn = fn(&Config, &Path, &CommonArgs) -> Result<ExitCode, String>;

fn run(cli: Cli) -> Result<ExitCode, String> {
    let (args, cmd): (&CommonArgs, CmdFn) = match &cli.cmd {
        Cmd::GenData(a) => (a, cmd_gen_data),
        Cmd::Train(a) => (a, cmd_train),
        Cmd::Evaluate(a) => (a, cmd_evaluate),
        Cmd::Audit(a) => (a, cmd_audit),
        Cmd::MpcRun(a) => (a, cmd_mpc_run),
        Cmd::Report(a) => (a, cmd_report),
    };
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.apply_overrides(args.seed, args.out.as_deref(), args.family.as_deref());
    let out = cfg.prepare_out_dir()?;
    cmd(&cfg, &out, args)
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Timestamps in configs may omit the seconds.
fn parse_start(s: &str) -> Result<NaiveDateTime, String> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .map_err(|_| format!("bad timestamp `{s}` (want YYYY-MM-DDTHH:MM)"))
}

fn write_file(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn cmd_gen_data(cfg: &Config, out: &Path, _args: &CommonArgs) -> Result<ExitCode, String> {
    let d = &cfg.data;
    let weather = generate_weather(&WeatherConfig {
        days: d.days,
        seed: d.seed,
        wind_day: d.wind_day,
        start: parse_start(&cfg.weather.start)?,
        t_amb_low: cfg.weather.t_amb_low,
        t_amb_high: cfg.weather.t_amb_high,
        q_sol_peak: cfg.weather.q_sol_peak,
    });
    let excitation = match d.excitation.as_str() {
        "random" => Excitation::Random { seed: d.seed },
        "thermostat" => Excitation::Thermostat { setpoint: d.setpoint },
        other => return Err(format!("unknown excitation `{other}` (random|thermostat)")),
    };
    let records = generate_dataset(&RoomModel::default(), &weather, &excitation, d.warm_up_steps)
        .map_err(err)?;
    features::io::write_records_csv(&out.join("raw.csv"), &records).map_err(err)?;
    weather.write_csv(&out.join("weather.csv")).map_err(err)?;
    println!(
        "gen-data: {} records over {} days ({} excitation, seed {}) -> {}",
        records.len(),
        d.days,
        d.excitation,
        d.seed,
        out.join("raw.csv").display(),
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &Config, out: &Path, _args: &CommonArgs) -> Result<ExitCode, String> {
    let t = &cfg.train;
    let family: ModelFamily = t.family.parse()?;
    if t.datasets.is_empty() {
        return Err("train.datasets is empty".into());
    }
    let mut records = Vec::new();
    for path in &t.datasets {
        records.extend(read_records_csv(path).map_err(err)?);
    }
    let mut loss_csv = String::from("rate_minutes,epoch,loss\n");
    for rate in [RATE_FINE_MIN, RATE_COARSE_MIN] {
        let resampled = features::resample(&records, rate).map_err(err)?;
        let ds = features::build_features(&resampled, rate).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let mut model = TrainedModel::init(family, rate, &mut rng);
        let losses = train(
            &mut model,
            &ds,
            &TrainConfig {
                lr: t.learning_rate,
                epochs: t.epochs_for(rate),
                batch_size: t.batch_size,
                seed: t.seed,
                ..TrainConfig::default()
            },
        )
        .map_err(err)?;
        // The trace is one batch MSE per optimizer step; log epoch means.
        let steps_per_epoch = ds.len().div_ceil(t.batch_size).max(1);
        let mut final_loss = f64::NAN;
        for (epoch, chunk) in losses.chunks(steps_per_epoch).enumerate() {
            final_loss = chunk.iter().sum::<f64>() / chunk.len() as f64;
            writeln!(loss_csv, "{rate},{},{final_loss}", epoch + 1).unwrap();
        }
        let path = out.join(format!("model-{rate}min.icnn"));
        model.save(&path).map_err(err)?;
        println!(
            "train: {family} @ {rate} min on {} rows, {} epochs, final loss {:.6} -> {}",
            ds.len(),
            t.epochs_for(rate),
            final_loss,
            path.display(),
        );
    }
    write_file(&out.join("loss.csv"), &loss_csv)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(cfg: &Config, out: &Path, _args: &CommonArgs) -> Result<ExitCode, String> {
    let ev = &cfg.evaluate;
    let records = read_records_csv(&ev.dataset).map_err(err)?;
    let mut summary = String::from("family,horizon,repetitions,median_mse,iqr_mse,min_mse,max_mse\n");
    let mut reps = String::from("family,horizon,repetition,mse\n");
    for family_name in &ev.families {
        let family: ModelFamily = family_name.parse()?;
        for horizon_name in &ev.horizons {
            let horizon: Horizon = horizon_name.parse()?;
            let epochs = ev.epochs.unwrap_or(if horizon.rate_minutes() <= RATE_FINE_MIN {
                ev.epochs_fine
            } else {
                ev.epochs_coarse
            });
            let kcfg = KfoldConfig {
                repetitions: ev.repetitions,
                train_folds: ev.train_folds,
                val_folds: ev.val_folds,
                horizon,
                train: TrainConfig {
                    lr: ev.learning_rate,
                    epochs,
                    batch_size: ev.batch_size,
                    seed: ev.seed,
                    ..TrainConfig::default()
                },
            };
            let rep = kfold_evaluate(family, &records, &kcfg).map_err(err)?;
            writeln!(
                summary,
                "{family_name},{horizon_name},{},{},{},{},{}",
                rep.mses.len(),
                rep.median,
                rep.iqr,
                rep.min,
                rep.max,
            )
            .unwrap();
            for (i, mse) in rep.mses.iter().enumerate() {
                writeln!(reps, "{family_name},{horizon_name},{},{mse}", i + 1).unwrap();
            }
            println!(
                "evaluate: {family_name} @ {horizon_name}: median MSE {:.6}, IQR {:.6} over {} repetitions",
                rep.median,
                rep.iqr,
                rep.mses.len(),
            );
        }
    }
    write_file(&out.join("evaluation.csv"), &summary)?;
    write_file(&out.join("repetitions.csv"), &reps)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(cfg: &Config, out: &Path, args: &CommonArgs) -> Result<ExitCode, String> {
    let a = &cfg.audit;
    let fine = TrainedModel::load(&a.fine_model).map_err(err)?;
    let coarse = TrainedModel::load(&a.coarse_model).map_err(err)?;
    let pair = ModelPair { fine, coarse };
    pair.validate().map_err(err)?;
    let plan = RolloutPlan::standard(&pair.fine, &pair.coarse).map_err(err)?;
    let started = Instant::now();
    let rep = audit_convexity(
        &plan,
        &AuditConfig { samples: a.samples, tolerance: a.tolerance, seed: a.seed, ..AuditConfig::default() },
    )
    .map_err(err)?;
    let elapsed = started.elapsed().as_secs_f64();

    let mut csv = String::from(
        "step,convexity_violations,monotonicity_violations,worst_convexity_gap,worst_monotonicity_gap\n",
    );
    for s in &rep.steps {
        writeln!(
            csv,
            "{},{},{},{},{}",
            s.step,
            s.convexity_violations,
            s.monotonicity_violations,
            s.worst_convexity_gap,
            s.worst_monotonicity_gap,
        )
        .unwrap();
    }
    write_file(&out.join("audit.csv"), &csv)?;

    let verdict = if rep.passed() { "PASS" } else { "FAIL" };
    println!(
        "audit: {verdict} — {} samples x {} steps, {} violations, worst gap {:.3e}, tolerance {:.1e}, {:.1}s",
        rep.samples,
        rep.steps.len(),
        rep.total_violations(),
        rep.worst_gap(),
        rep.tolerance,
        elapsed,
    );
    if !rep.passed() && args.strict {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_mpc_run(cfg: &Config, out: &Path, _args: &CommonArgs) -> Result<ExitCode, String> {
    let m = &cfg.mpc;
    let fine = TrainedModel::load(&m.fine_model).map_err(err)?;
    let coarse = TrainedModel::load(&m.coarse_model).map_err(err)?;
    let pair = ModelPair { fine, coarse };
    pair.validate().map_err(err)?;

    let weather = match &m.weather {
        Some(path) => WeatherTrace::read_csv(path).map_err(err)?,
        None => generate_weather(&WeatherConfig {
            days: m.days,
            seed: m.seed,
            wind_day: m.wind_day,
            start: parse_start(&m.start)?,
            t_amb_low: cfg.weather.t_amb_low,
            t_amb_high: cfg.weather.t_amb_high,
            q_sol_peak: cfg.weather.q_sol_peak,
        }),
    };
    weather.write_csv(&out.join("mpc-weather.csv")).map_err(err)?;
    let schedule = match &m.schedule {
        Some(path) => Schedule::read_csv(path).map_err(err)?,
        None => Schedule::default_cooling(),
    };
    schedule.write_csv(&out.join("schedule.csv")).map_err(err)?;
    let ccfg = ControllerConfig {
        r: m.r,
        lambda: m.lambda,
        u_min: m.u_min,
        u_max: m.u_max,
        comfort_margin: m.comfort_margin,
        bias_gain: m.bias_gain,
        ..ControllerConfig::default()
    };
    let mut forecaster: Box<dyn Forecaster + '_> = match m.forecast.as_str() {
        "perfect" => Box::new(PerfectForecast::new(&weather)),
        "persistence" => Box::new(PersistenceForecast::default()),
        other => return Err(format!("unknown forecast `{other}` (perfect|persistence)")),
    };

    let plant = RoomModel::default();
    let started = Instant::now();
    let log = closed_loop_mpc(
        &plant,
        &weather,
        &pair.fine,
        &pair.coarse,
        &schedule,
        &ccfg,
        forecaster.as_mut(),
        m.warm_up_steps,
    )
    .map_err(err)?;
    let elapsed = started.elapsed().as_secs_f64();
    log.write_csv(&out.join("mpc-log.csv")).map_err(err)?;

    let mut summary =
        String::from("controller,energy_kwh,violation_kh,violation_kh_no_wind,mean_solve_ms,max_solve_ms\n");
    let (mean_ms, max_ms) = log.solve_ms().unwrap_or((0.0, 0.0));
    writeln!(
        summary,
        "mpc,{},{},{},{},{}",
        log.energy_kwh(),
        log.violation_kh(),
        log.violation_kh_no_wind(),
        mean_ms,
        max_ms,
    )
    .unwrap();
    println!(
        "mpc-run: {} steps in {:.1}s — energy {:.3} kWh, violation {:.3} K·h ({:.3} excl. storm), solve mean {:.0} ms / max {:.0} ms",
        log.rows.len(),
        elapsed,
        log.energy_kwh(),
        log.violation_kh(),
        log.violation_kh_no_wind(),
        mean_ms,
        max_ms,
    );

    if m.thermostat_baseline {
        let base = closed_loop_thermostat(&plant, &weather, &schedule).map_err(err)?;
        base.write_csv(&out.join("thermostat-log.csv")).map_err(err)?;
        writeln!(
            summary,
            "thermostat,{},{},{},,",
            base.energy_kwh(),
            base.violation_kh(),
            base.violation_kh_no_wind(),
        )
        .unwrap();
        println!(
            "mpc-run: thermostat baseline — energy {:.3} kWh, violation {:.3} K·h ({:.3} excl. storm)",
            base.energy_kwh(),
            base.violation_kh(),
            base.violation_kh_no_wind(),
        );
    }
    write_file(&out.join("summary.csv"), &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(cfg: &Config, out: &Path, _args: &CommonArgs) -> Result<ExitCode, String> {
    let r = &cfg.report;
    let mpc = RunLog::read_csv(&r.mpc_log).map_err(err)?;
    let thermostat = match &r.thermostat_log {
        Some(path) if path.exists() => Some(RunLog::read_csv(path).map_err(err)?),
        _ => None,
    };
    let svg = report::render_report(&mpc, thermostat.as_ref());
    let path = out.join("report.svg");
    write_file(&path, &svg)?;
    println!(
        "report: {} MPC steps{} -> {}",
        mpc.rows.len(),
        if thermostat.is_some() { " with thermostat overlay" } else { "" },
        path.display(),
    );
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
