//! Declarative run configuration: a flat TOML file with one section per
//! pipeline stage. Unknown keys are rejected, every field has a default,
//! and each command echoes the fully-resolved configuration it ran with
//! into its output directory, so any result can be reproduced from that
//! echo alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Output directory; `--out` overrides.
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub weather: WeatherSection,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub audit: AuditSection,
    pub mpc: MpcSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Days of synthetic data (365 ≈ twelve months for the fold splits).
    pub days: usize,
    pub seed: u64,
    /// `random` (held random inputs, rich excitation) or `thermostat`.
    pub excitation: String,
    /// Setpoint for thermostat excitation, °C.
    pub setpoint: f64,
    /// Steps dropped from the front of the record.
    pub warm_up_steps: usize,
    /// Day index whose daylight hours get the storm flag, if any.
    pub wind_day: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            days: 365,
            seed: 0,
            excitation: "random".into(),
            setpoint: 24.0,
            warm_up_steps: 0,
            wind_day: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeatherSection {
    /// First timestamp of generated weather, `YYYY-MM-DDTHH:MM`.
    pub start: String,
    pub t_amb_low: f64,
    pub t_amb_high: f64,
    pub q_sol_peak: f64,
}

impl Default for WeatherSection {
    fn default() -> Self {
        WeatherSection {
            start: "2023-01-01T00:00".into(),
            t_amb_low: 20.0,
            t_amb_high: 32.0,
            q_sol_peak: 800.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Raw records CSVs to train on, concatenated in order. Several years
    /// of identification data (one gen-data run each) give a markedly
    /// better coarse model than one.
    pub datasets: Vec<PathBuf>,
    /// ficnn-amos | ficnn-mpc | picnn-amos | picnn-mpc.
    pub family: String,
    pub seed: u64,
    /// Overrides epochs at both rates when set.
    pub epochs: Option<usize>,
    pub epochs_fine: usize,
    pub epochs_coarse: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            datasets: vec!["out/raw.csv".into()],
            family: "picnn-mpc".into(),
            seed: 0,
            epochs: None,
            epochs_fine: 20,
            epochs_coarse: 40,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

impl TrainSection {
    pub fn epochs_for(&self, rate_minutes: u32) -> usize {
        self.epochs.unwrap_or(if rate_minutes <= 20 {
            self.epochs_fine
        } else {
            self.epochs_coarse
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub dataset: PathBuf,
    /// Families to evaluate; `--family` narrows to one.
    pub families: Vec<String>,
    /// Multi-step horizons: any of `1h`, `6h`.
    pub horizons: Vec<String>,
    pub repetitions: usize,
    pub train_folds: usize,
    pub val_folds: usize,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub epochs_fine: usize,
    pub epochs_coarse: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            dataset: "out/raw.csv".into(),
            families: vec![
                "ficnn-amos".into(),
                "ficnn-mpc".into(),
                "picnn-amos".into(),
                "picnn-mpc".into(),
            ],
            horizons: vec!["1h".into(), "6h".into()],
            repetitions: 20,
            train_folds: 9,
            val_folds: 3,
            seed: 0,
            epochs: None,
            epochs_fine: 20,
            epochs_coarse: 40,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    pub fine_model: PathBuf,
    pub coarse_model: PathBuf,
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            fine_model: "out/model-20min.icnn".into(),
            coarse_model: "out/model-180min.icnn".into(),
            samples: 10_000,
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub fine_model: PathBuf,
    pub coarse_model: PathBuf,
    /// Weather CSV to run against; generated when absent.
    pub weather: Option<PathBuf>,
    /// First timestamp of the generated run weather.
    pub start: String,
    pub days: usize,
    pub seed: u64,
    /// Day whose daylight hours force the blinds open.
    pub wind_day: Option<usize>,
    /// Comfort schedule CSV; the built-in cooling schedule when absent.
    pub schedule: Option<PathBuf>,
    /// `perfect` (reads the run weather) or `persistence`.
    pub forecast: String,
    pub warm_up_steps: usize,
    pub thermostat_baseline: bool,
    pub r: f64,
    pub lambda: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Constraint back-off inside the scheduled band, K.
    pub comfort_margin: f64,
    /// Integral gain on the controller's one-step prediction error.
    pub bias_gain: f64,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            fine_model: "out/model-20min.icnn".into(),
            coarse_model: "out/model-180min.icnn".into(),
            weather: None,
            start: "2023-07-03T00:00".into(),
            days: 5,
            seed: 5,
            wind_day: Some(3),
            schedule: None,
            forecast: "perfect".into(),
            warm_up_steps: 9,
            thermostat_baseline: true,
            r: 1.0,
            lambda: 100.0,
            u_min: -0.6,
            u_max: 0.0,
            comfort_margin: 0.02,
            bias_gain: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub mpc_log: PathBuf,
    /// Overlaid when the file exists.
    pub thermostat_log: Option<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            mpc_log: "out/mpc-log.csv".into(),
            thermostat_log: Some("out/thermostat-log.csv".into()),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    /// Apply command-line overrides; `--seed` retargets every stage so one
    /// flag reseeds a whole pipeline run.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        out: Option<&Path>,
        family: Option<&str>,
    ) {
        if let Some(seed) = seed {
            self.data.seed = seed;
            self.train.seed = seed;
            self.evaluate.seed = seed;
            self.audit.seed = seed;
            self.mpc.seed = seed;
        }
        if let Some(out) = out {
            self.out = Some(out.to_path_buf());
        }
        if let Some(family) = family {
            self.train.family = family.to_string();
            self.evaluate.families = vec![family.to_string()];
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| "out".into())
    }

    /// Create the output directory and echo the resolved configuration.
    pub fn prepare_out_dir(&self) -> Result<PathBuf, String> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir)
            .map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        let echo = toml::to_string_pretty(self)
            .map_err(|e| format!("cannot serialize config: {e}"))?;
        let path = dir.join("resolved-config.toml");
        std::fs::write(&path, echo)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(format!("{back:?}"), format!("{cfg:?}"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<Config>("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(toml::from_str::<Config>("[typo]\n").is_err());
    }

    #[test]
    fn overrides_retarget_every_stage() {
        let mut cfg = Config::default();
        cfg.apply_overrides(Some(7), Some(Path::new("elsewhere")), Some("picnn-mpc"));
        for seed in [cfg.data.seed, cfg.train.seed, cfg.evaluate.seed, cfg.audit.seed, cfg.mpc.seed]
        {
            assert_eq!(seed, 7);
        }
        assert_eq!(cfg.out_dir(), PathBuf::from("elsewhere"));
        assert_eq!(cfg.train.family, "picnn-mpc");
        assert_eq!(cfg.evaluate.families, vec!["picnn-mpc".to_string()]);
    }

    #[test]
    fn epoch_override_applies_to_both_rates() {
        let mut t = TrainSection::default();
        assert_eq!(t.epochs_for(20), 20);
        assert_eq!(t.epochs_for(180), 40);
        t.epochs = Some(3);
        assert_eq!(t.epochs_for(20), 3);
        assert_eq!(t.epochs_for(180), 3);
    }
}
