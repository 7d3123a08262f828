//! Scalar activations. All of them are convex and non-decreasing, which is
//! what the convexity guarantees of the network modes rely on.

use serde::{Deserialize, Serialize};

/// Elementwise activation function.
///
/// `ShiftedRelu(beta)` computes `max(x, 0) - beta` and is used on output
/// layers so the network can emit negative temperature deltas while keeping
/// a ReLU-shaped (convex, non-decreasing) response; `beta` must be >= 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    ShiftedRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::ShiftedRelu(beta) => x.max(0.0) - beta,
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`. The ReLU kink at exactly zero takes subgradient 0.
    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::ShiftedRelu(_) => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Structural validity: the shift of `ShiftedRelu` must be non-negative.
    pub fn is_valid(self) -> bool {
        match self {
            Activation::ShiftedRelu(beta) => beta >= 0.0 && beta.is_finite(),
            _ => true,
        }
    }
}
