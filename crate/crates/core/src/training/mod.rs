//! Mini-batch training with feasibility projection, plus the month-fold
//! evaluation harness.
//!
//! The optimizer is plain Adam over the flattened parameter vector. After
//! *every* step the parameters are projected back onto the mode's feasible
//! set (sign-constrained weights clamped to zero), so the invariants that
//! make multi-step predictions convex hold at all times — not just at
//! convergence. Training is deterministic for a fixed seed: batch order,
//! weight updates and the returned loss trace are bit-identical across runs.

pub mod backprop;
pub mod kfold;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{Dataset, Y_DIM, YTILDE_DIM};
use crate::icnn::IcnnError;
use crate::model::TrainedModel;
use crate::norm::ZScore;
use backprop::{accumulate, Sample, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset rate {got} min does not match the required {expected} min")]
    RateMismatch { expected: u32, got: u32 },
    #[error("need at least {need} month folds, found {have}")]
    TooFewFolds { have: usize, need: usize },
    #[error("cross-validation needs at least one repetition")]
    NoRepetitions,
    #[error("held-out months contain no contiguous validation window")]
    NoValidationWindows,
    #[error(transparent)]
    Icnn(#[from] IcnnError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
}

/// Fit the model's input standardisation on `ds`, then run mini-batch Adam
/// with projection after every step. Returns the loss trace: one batch MSE
/// (measured before the update) per step, `epochs · ⌈n/batch⌉` entries.
pub fn train(
    model: &mut TrainedModel,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    model.norm.y = ZScore::fit(Y_DIM, ds.rows.iter().map(|r| r.features.y.as_slice()));
    model.norm.ytilde =
        ZScore::fit(YTILDE_DIM, ds.rows.iter().map(|r| r.features.ytilde.as_slice()));

    // Standardise once up front; the loop indexes into flat arrays.
    let n = ds.len();
    let picnn = model.family.is_partially_convex();
    let y_stride = if picnn { Y_DIM } else { Y_DIM + YTILDE_DIM };
    let yt_stride = if picnn { YTILDE_DIM } else { 0 };
    let mut ys = vec![0.0; n * y_stride];
    let mut yts = vec![0.0; n * yt_stride];
    let mut targets = vec![0.0; n];
    for (i, row) in ds.rows.iter().enumerate() {
        let dst = &mut ys[i * y_stride..(i + 1) * y_stride];
        model.norm.y.apply_into(&row.features.y, &mut dst[..Y_DIM]);
        if picnn {
            model
                .norm
                .ytilde
                .apply_into(&row.features.ytilde, &mut yts[i * yt_stride..(i + 1) * yt_stride]);
        } else {
            model.norm.ytilde.apply_into(&row.features.ytilde, &mut dst[Y_DIM..]);
        }
        targets[i] = row.target;
    }
    let sample_at = |i: usize| Sample {
        y: &ys[i * y_stride..(i + 1) * y_stride],
        ytilde: if picnn { &yts[i * yt_stride..(i + 1) * yt_stride] } else { &[] },
        target: targets[i],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut tape = Tape::new(&model.params);
    let mut grads = model.params.zeros_like();
    let zero_flat = vec![0.0; model.params.weight_count()];
    let mut adam = Adam::new(cfg, zero_flat.len());
    let mut trace = Vec::with_capacity(cfg.epochs * n.div_ceil(cfg.batch_size));
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| sample_at(i)));
            grads.set_from_flat(&zero_flat);
            let mse = accumulate(&model.params, &mut tape, &mut grads, &batch)?;
            if !mse.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            trace.push(mse);
            let mut flat = model.params.flatten();
            adam.step(&mut flat, &grads.flatten());
            model.params.set_from_flat(&flat);
            model.params.project_feasible();
        }
    }
    Ok(trace)
}

/// Textbook Adam with bias correction, operating on flat weight vectors.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    fn new(cfg: &TrainConfig, dim: usize) -> Adam {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            weights[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
