//! Trained model bundles: network weights plus the input standardisation
//! they were fitted with, tagged by family and sampling rate.
//!
//! Two rates are used throughout: a 20-minute model covering the first hour
//! of a prediction horizon and a 180-minute model covering the rest. Their
//! default shapes follow the tuned settings this project ships with —
//! 4 weight layers of 9 nodes with output shift 0.8 at 20 min, 4 layers of
//! 8 nodes with shift 12 at 180 min.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::activation::Activation;
use crate::features::{FeatureVector, Y_DIM, YTILDE_DIM};
use crate::icnn::serialize::{
    join_floats, parse_floats, read_params, write_params, LineReader,
};
use crate::icnn::{FicnnParams, IcnnError, IcnnParams, Mode, PicnnParams};
use crate::norm::{Normalizer, ZScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    FicnnAmos,
    FicnnMpc,
    PicnnAmos,
    PicnnMpc,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::FicnnAmos,
        ModelFamily::FicnnMpc,
        ModelFamily::PicnnAmos,
        ModelFamily::PicnnMpc,
    ];

    pub fn mode(self) -> Mode {
        match self {
            ModelFamily::FicnnAmos | ModelFamily::PicnnAmos => Mode::Amos,
            ModelFamily::FicnnMpc | ModelFamily::PicnnMpc => Mode::Mpc,
        }
    }

    pub fn is_partially_convex(self) -> bool {
        matches!(self, ModelFamily::PicnnAmos | ModelFamily::PicnnMpc)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::FicnnAmos => "ficnn-amos",
            ModelFamily::FicnnMpc => "ficnn-mpc",
            ModelFamily::PicnnAmos => "picnn-amos",
            ModelFamily::PicnnMpc => "picnn-mpc",
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ficnn-amos" => Ok(ModelFamily::FicnnAmos),
            "ficnn-mpc" => Ok(ModelFamily::FicnnMpc),
            "picnn-amos" => Ok(ModelFamily::PicnnAmos),
            "picnn-mpc" => Ok(ModelFamily::PicnnMpc),
            other => Err(format!(
                "unknown family `{other}` (expected ficnn-amos, ficnn-mpc, picnn-amos or picnn-mpc)"
            )),
        }
    }
}

/// Hidden width and output shift for a sampling rate.
pub fn default_shape(rate_minutes: u32) -> (usize, f64) {
    if rate_minutes >= 180 {
        (8, 12.0)
    } else {
        (9, 0.8)
    }
}

/// Network weights, their input standardisation, and bookkeeping tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub family: ModelFamily,
    pub rate_minutes: u32,
    pub params: IcnnParams,
    pub norm: Normalizer,
}

impl TrainedModel {
    /// Fresh model with the default shape for `rate_minutes` and identity
    /// standardisation (training fits the real statistics later).
    pub fn init<R: Rng>(family: ModelFamily, rate_minutes: u32, rng: &mut R) -> TrainedModel {
        let (width, beta) = default_shape(rate_minutes);
        TrainedModel::init_with_shape(family, rate_minutes, width, beta, rng)
    }

    pub fn init_with_shape<R: Rng>(
        family: ModelFamily,
        rate_minutes: u32,
        hidden_width: usize,
        beta: f64,
        rng: &mut R,
    ) -> TrainedModel {
        let widths = [hidden_width, hidden_width, hidden_width, 1];
        let output = Activation::ShiftedRelu(beta);
        let params = if family.is_partially_convex() {
            let v_widths = [hidden_width; 3];
            IcnnParams::Picnn(PicnnParams::init(
                family.mode(),
                Y_DIM,
                YTILDE_DIM,
                &widths,
                &v_widths,
                Activation::Relu,
                output,
                rng,
            ))
        } else {
            IcnnParams::Ficnn(FicnnParams::init(
                family.mode(),
                Y_DIM + YTILDE_DIM,
                &widths,
                Activation::Relu,
                output,
                rng,
            ))
        };
        TrainedModel {
            family,
            rate_minutes,
            params,
            norm: Normalizer::identity(Y_DIM, YTILDE_DIM),
        }
    }

    /// Predicted temperature change ΔT_br (K) over one step at this model's
    /// rate. Standardises the inputs, then evaluates the network; fully
    /// convex families see the concatenated `[y, ytilde]` vector.
    pub fn predict_delta(&self, f: &FeatureVector) -> Result<f64, IcnnError> {
        let y = self.norm.y.apply(&f.y);
        let yt = self.norm.ytilde.apply(&f.ytilde);
        if self.family.is_partially_convex() {
            self.params.forward(&y, &yt)
        } else {
            let mut all = y;
            all.extend_from_slice(&yt);
            self.params.forward(&all, &[])
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), IcnnError> {
        self.check_consistent()?;
        let mut out = String::new();
        out.push_str("icnn-model v1\n");
        out.push_str(&format!("family {}\n", self.family.name()));
        out.push_str(&format!("rate-minutes {}\n", self.rate_minutes));
        write_zscore(&mut out, "norm-y", &self.norm.y);
        write_zscore(&mut out, "norm-ytilde", &self.norm.ytilde);
        write_params(&mut out, &self.params)?;
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load and fully re-check a model file: structure, family/mode
    /// consistency, and the sign constraints on the weights. A hand-edited
    /// file with a negative constrained weight is rejected here.
    pub fn load(path: &Path) -> Result<TrainedModel, IcnnError> {
        let text = std::fs::read_to_string(path)?;
        let mut r = LineReader::new(&text);
        let version = r.expect_key("icnn-model")?;
        if version != "v1" {
            return Err(r.invalid(format!("unsupported version `{version}`")));
        }
        let family: ModelFamily =
            r.expect_key("family")?.parse().map_err(|e: String| r.invalid(e))?;
        let rate_minutes: u32 = r.parse_key("rate-minutes")?;
        let y = read_zscore(&mut r, "norm-y")?;
        let ytilde = read_zscore(&mut r, "norm-ytilde")?;
        let params = read_params(&mut r)?;
        let model =
            TrainedModel { family, rate_minutes, params, norm: Normalizer { y, ytilde } };
        model.check_consistent()?;
        model.params.check_feasible()?;
        Ok(model)
    }

    fn check_consistent(&self) -> Result<(), IcnnError> {
        let fail = |what: String| Err(IcnnError::Format(what));
        if self.params.mode() != self.family.mode() {
            return fail(format!(
                "family {} carries {:?}-mode weights",
                self.family,
                self.params.mode()
            ));
        }
        match (&self.params, self.family.is_partially_convex()) {
            (IcnnParams::Ficnn(_), true) | (IcnnParams::Picnn(_), false) => {
                return fail(format!("family {} does not match the network kind", self.family));
            }
            (IcnnParams::Ficnn(p), false) => {
                if p.input_dim != Y_DIM + YTILDE_DIM {
                    return fail(format!("input dim {} ≠ {}", p.input_dim, Y_DIM + YTILDE_DIM));
                }
            }
            (IcnnParams::Picnn(p), true) => {
                if p.y_dim != Y_DIM || p.ytilde_dim != YTILDE_DIM {
                    return fail(format!("input dims ({}, {})", p.y_dim, p.ytilde_dim));
                }
            }
        }
        if self.norm.y.dim() != Y_DIM || self.norm.ytilde.dim() != YTILDE_DIM {
            return fail("standardisation dims do not match the feature layout".into());
        }
        Ok(())
    }
}

fn write_zscore(out: &mut String, key: &str, z: &ZScore) {
    out.push_str(&format!("{key}-mean {}\n", join_floats(&z.mean)));
    out.push_str(&format!("{key}-scale {}\n", join_floats(&z.scale)));
}

fn read_zscore(r: &mut LineReader, key: &str) -> Result<ZScore, IcnnError> {
    let mean = parse_floats(&r.expect_key(&format!("{key}-mean"))?, r)?;
    let scale = parse_floats(&r.expect_key(&format!("{key}-scale"))?, r)?;
    if mean.len() != scale.len() {
        return Err(r.invalid(format!("{key} mean/scale lengths differ")));
    }
    if !scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
        return Err(r.invalid(format!("{key} scales must be positive")));
    }
    Ok(ZScore { mean, scale })
}

/// Convenience: the pair of models driving one prediction horizon.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub fine: TrainedModel,
    pub coarse: TrainedModel,
}

impl ModelPair {
    pub fn validate(&self) -> Result<(), IcnnError> {
        if self.fine.rate_minutes >= self.coarse.rate_minutes {
            return Err(IcnnError::Format(format!(
                "fine rate {} must be below coarse rate {}",
                self.fine.rate_minutes, self.coarse.rate_minutes
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_features() -> FeatureVector {
        FeatureVector {
            y: [6.3, 0.12, -0.05, 0.2, -0.4],
            ytilde: [310.0, 295.0, 280.0, 0.5, -0.8660254, 1.4],
        }
    }

    #[test]
    fn default_shapes_follow_the_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for family in ModelFamily::ALL {
            for (rate, width) in [(20u32, 9usize), (180, 8)] {
                let m = TrainedModel::init(family, rate, &mut rng);
                m.params.validate().unwrap();
                m.params.check_feasible().unwrap();
                match &m.params {
                    IcnnParams::Ficnn(p) => assert_eq!(p.widths(), vec![width, width, width, 1]),
                    IcnnParams::Picnn(p) => {
                        assert_eq!(p.widths(), vec![width, width, width, 1]);
                        assert_eq!(p.v_widths(), vec![width; 3]);
                    }
                }
                assert!(m.predict_delta(&sample_features()).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn save_load_round_trip_preserves_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (i, family) in ModelFamily::ALL.into_iter().enumerate() {
            let mut m = TrainedModel::init(family, 20, &mut rng);
            m.norm.y = ZScore { mean: vec![0.5; Y_DIM], scale: vec![2.0; Y_DIM] };
            let path = dir.path().join(format!("model-{i}.txt"));
            m.save(&path).unwrap();
            let loaded = TrainedModel::load(&path).unwrap();
            assert_eq!(m, loaded);
            let f = sample_features();
            assert_eq!(
                m.predict_delta(&f).unwrap().to_bits(),
                loaded.predict_delta(&f).unwrap().to_bits()
            );
            // Saving the loaded model reproduces the file byte for byte.
            let again = dir.path().join("again.txt");
            loaded.save(&again).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        }
    }

    #[test]
    fn planted_negative_weight_is_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = TrainedModel::init(ModelFamily::FicnnMpc, 20, &mut rng);
        // Force a sign violation past the projection, as a hand-edited file would.
        let mut flat = m.params.flatten();
        let mask = m.params.nonneg_mask();
        let idx = mask.iter().position(|&c| c).unwrap();
        flat[idx] = -0.25;
        m.params.set_from_flat(&flat);
        m.save(&path).unwrap();
        match TrainedModel::load(&path) {
            Err(IcnnError::InfeasibleWeight { value, .. }) => assert_eq!(value, -0.25),
            other => panic!("expected InfeasibleWeight, got {other:?}"),
        }
    }

    #[test]
    fn family_strings_round_trip() {
        for family in ModelFamily::ALL {
            assert_eq!(family.name().parse::<ModelFamily>().unwrap(), family);
        }
        assert!("ficnn".parse::<ModelFamily>().is_err());
    }
}
