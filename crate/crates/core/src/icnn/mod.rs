//! Input-convex network parameterisations.
//!
//! Two architectures are provided:
//!
//! * [`FicnnParams`] — fully input-convex: every input is a "convex" input.
//! * [`PicnnParams`] — partially input-convex: a convex path `z` driven by
//!   the convex inputs `y`, modulated by a free nonconvex path `v` driven by
//!   the remaining inputs `ỹ`.
//!
//! Both come in two weight **modes**:
//!
//! * [`Mode::Amos`] — only the propagation weights `Wz` (hidden-to-hidden on
//!   the convex path) are constrained non-negative. The output is convex in
//!   `y` for a *single* evaluation, but composing steps (feeding one step's
//!   output back in as the next step's input) can destroy convexity, because
//!   the input weights `Wy` may be negative.
//! * [`Mode::Mpc`] — additionally constrains all input weights `Wy` to be
//!   non-negative, and (for the partially-convex variant) wraps the gate
//!   terms in ReLU so the modulation factors stay non-negative. The output is
//!   then convex *and non-decreasing* in `y`, and non-decreasing convex
//!   functions compose: whole multi-step rollouts stay convex in the inputs.
//!
//! Feasibility (the sign constraints of the mode) is enforced by
//! [`project_feasible`](FicnnParams::project_feasible), which training calls
//! after every optimiser step.

mod ficnn;
mod picnn;
pub mod serialize;

pub use ficnn::{FicnnLayer, FicnnParams};
pub use picnn::{PicnnLayer, PicnnParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weight-constraint mode. See the module docs for what each mode guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Amos,
    Mpc,
}

#[derive(Debug, Error)]
pub enum IcnnError {
    #[error("layer {layer}: {what} expects length {expected}, got {got}")]
    DimMismatch { layer: usize, what: &'static str, expected: usize, got: usize },
    #[error("layer {layer}: {what}")]
    InvalidStructure { layer: usize, what: String },
    #[error("layer {layer}: {mode:?} mode requires {what}")]
    ModeActivation { layer: usize, mode: Mode, what: &'static str },
    #[error("weight {index} is {value} but must be non-negative")]
    InfeasibleWeight { index: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Either network kind behind one handle, so models can be stored and
/// evaluated uniformly.
#[derive(Debug, Clone, PartialEq)]
pub enum IcnnParams {
    Ficnn(FicnnParams),
    Picnn(PicnnParams),
}

impl IcnnParams {
    pub fn mode(&self) -> Mode {
        match self {
            IcnnParams::Ficnn(p) => p.mode,
            IcnnParams::Picnn(p) => p.mode,
        }
    }

    /// Evaluate the network. For the fully-convex variant the caller passes
    /// the full input as `y` and an empty `ytilde`.
    pub fn forward(&self, y: &[f64], ytilde: &[f64]) -> Result<f64, IcnnError> {
        match self {
            IcnnParams::Ficnn(p) => {
                if !ytilde.is_empty() {
                    return Err(IcnnError::DimMismatch {
                        layer: 0,
                        what: "ytilde (fully-convex network takes none)",
                        expected: 0,
                        got: ytilde.len(),
                    });
                }
                p.forward(y)
            }
            IcnnParams::Picnn(p) => p.forward(y, ytilde),
        }
    }

    pub fn validate(&self) -> Result<(), IcnnError> {
        match self {
            IcnnParams::Ficnn(p) => p.validate(),
            IcnnParams::Picnn(p) => p.validate(),
        }
    }

    pub fn project_feasible(&mut self) {
        match self {
            IcnnParams::Ficnn(p) => p.project_feasible(),
            IcnnParams::Picnn(p) => p.project_feasible(),
        }
    }

    /// Verify that every sign-constrained weight is actually non-negative.
    pub fn check_feasible(&self) -> Result<(), IcnnError> {
        let flat = self.flatten();
        for (i, (v, constrained)) in flat.iter().zip(self.nonneg_mask()).enumerate() {
            if constrained && *v < 0.0 {
                return Err(IcnnError::InfeasibleWeight { index: i, value: *v });
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            IcnnParams::Ficnn(p) => p.flatten(),
            IcnnParams::Picnn(p) => p.flatten(),
        }
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        match self {
            IcnnParams::Ficnn(p) => p.set_from_flat(flat),
            IcnnParams::Picnn(p) => p.set_from_flat(flat),
        }
    }

    /// Per-weight flag (aligned with [`flatten`](Self::flatten)): `true`
    /// where the mode constrains the weight to be non-negative.
    pub fn nonneg_mask(&self) -> Vec<bool> {
        match self {
            IcnnParams::Ficnn(p) => p.nonneg_mask(),
            IcnnParams::Picnn(p) => p.nonneg_mask(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            IcnnParams::Ficnn(p) => IcnnParams::Ficnn(p.zeros_like()),
            IcnnParams::Picnn(p) => IcnnParams::Picnn(p.zeros_like()),
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            IcnnParams::Ficnn(p) => p.weight_count(),
            IcnnParams::Picnn(p) => p.weight_count(),
        }
    }
}
