//! Convex neural surrogate models and a soft-constrained MPC controller for
//! room climate control.
//!
//! The crate is organised around one pipeline:
//!
//! 1. [`simulator`] — a 2R2C room model that generates identification data
//!    and serves as the closed-loop plant.
//! 2. [`features`] — turns raw temperature/irradiation/input logs into
//!    lagged regression rows at a given sampling rate.
//! 3. [`icnn`] — fully- and partially-input-convex network parameterisations
//!    (`Ficnn*`/`Picnn*`) whose *Mpc* weight mode keeps multi-step
//!    compositions convex and non-decreasing in the controlled inputs.
//! 4. [`training`] — mini-batch Adam with feasibility projection after every
//!    step, plus a month-fold evaluation harness.
//! 5. [`rollout`] — multi-rate trajectory prediction (fine steps followed by
//!    coarse steps) and a sampling-based convexity/monotonicity audit.
//! 6. [`mpc`] — slack elimination, a derivative-free trust-region solver and
//!    the receding-horizon controller.
//!
//! Everything is deterministic for a fixed seed: training, data generation
//! and audits reproduce bit-identical artifacts.

pub mod activation;
pub mod features;
pub mod icnn;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod norm;
pub mod rollout;
pub mod simulator;
pub mod training;

pub use activation::Activation;
pub use icnn::{FicnnParams, IcnnError, IcnnParams, Mode, PicnnParams};
pub use model::{ModelFamily, TrainedModel};

/// Derive an independent RNG seed for a numbered work item (audit sample,
/// cross-validation repetition, …). Splitmix-style multiply keeps nearby
/// indices uncorrelated, and results don't depend on iteration order, so
/// parallel runs stay deterministic.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut x = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
