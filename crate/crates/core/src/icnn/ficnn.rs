//! Fully input-convex network.
//!
//! Layer recursion (`z_0` is empty, so layer 0 has no `wz`):
//!
//! ```text
//! z_{i+1} = g_i( Wz_i · z_i + Wy_i · y + b_i )
//! ```
//!
//! With `Wz_i >= 0` and convex non-decreasing `g_i`, the scalar output `z_L`
//! is convex in `y`; with `Wy_i >= 0` as well (Mpc mode) it is also
//! non-decreasing in every input coordinate.

use rand::Rng;

use super::{IcnnError, Mode};
use crate::activation::Activation;
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct FicnnLayer {
    /// Propagation weights from the previous layer; `None` on layer 0.
    pub wz: Option<Mat>,
    /// Input shortcut weights (every layer sees the raw input).
    pub wy: Mat,
    pub b: Vec<f64>,
    pub g: Activation,
}

impl FicnnLayer {
    fn width(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FicnnParams {
    pub mode: Mode,
    pub input_dim: usize,
    pub layers: Vec<FicnnLayer>,
}

impl FicnnParams {
    /// Random initialisation: matrices `uniform(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, then projected onto the mode's
    /// feasible set.
    ///
    /// Biases start at 0.1 rather than 0: the projection zeroes roughly half
    /// of each constrained matrix, and a fully-clamped row with a zero bias
    /// would leave a ReLU unit pinned at its kink with zero gradient — dead
    /// for the rest of training.
    ///
    /// `widths` are the output widths of each layer; the last must be 1.
    pub fn init<R: Rng>(
        mode: Mode,
        input_dim: usize,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(!widths.is_empty() && *widths.last().unwrap() == 1, "output width must be 1");
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = 0usize;
        for (i, &w) in widths.iter().enumerate() {
            let g = if i + 1 == widths.len() { output } else { hidden };
            let wz = if i == 0 { None } else { Some(glorot(w, prev, rng)) };
            layers.push(FicnnLayer { wz, wy: glorot(w, input_dim, rng), b: vec![0.1; w], g });
            prev = w;
        }
        let mut p = FicnnParams { mode, input_dim, layers };
        p.project_feasible();
        p
    }

    pub fn forward(&self, y: &[f64]) -> Result<f64, IcnnError> {
        if y.len() != self.input_dim {
            return Err(IcnnError::DimMismatch {
                layer: 0,
                what: "input y",
                expected: self.input_dim,
                got: y.len(),
            });
        }
        let mut z: Vec<f64> = Vec::new();
        for layer in &self.layers {
            let mut t = layer.b.clone();
            layer.wy.mul_vec_add(y, &mut t);
            if let Some(wz) = &layer.wz {
                wz.mul_vec_add(&z, &mut t);
            }
            for v in &mut t {
                *v = layer.g.apply(*v);
            }
            z = t;
        }
        Ok(z[0])
    }

    /// Structural checks: dimension chaining, scalar output, activation
    /// validity, `wz` present exactly on layers past the first.
    pub fn validate(&self) -> Result<(), IcnnError> {
        if self.layers.is_empty() {
            return Err(IcnnError::InvalidStructure { layer: 0, what: "no layers".into() });
        }
        let mut prev = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.width();
            if layer.wy.rows() != w || layer.wy.cols() != self.input_dim {
                return Err(IcnnError::InvalidStructure {
                    layer: i,
                    what: format!(
                        "wy is {}x{}, expected {}x{}",
                        layer.wy.rows(),
                        layer.wy.cols(),
                        w,
                        self.input_dim
                    ),
                });
            }
            match (&layer.wz, i) {
                (Some(_), 0) => {
                    return Err(IcnnError::InvalidStructure {
                        layer: 0,
                        what: "layer 0 must not have wz (z_0 is empty)".into(),
                    })
                }
                (None, i) if i > 0 => {
                    return Err(IcnnError::InvalidStructure {
                        layer: i,
                        what: "missing wz".into(),
                    })
                }
                (Some(wz), _) => {
                    if wz.rows() != w || wz.cols() != prev {
                        return Err(IcnnError::InvalidStructure {
                            layer: i,
                            what: format!(
                                "wz is {}x{}, expected {}x{}",
                                wz.rows(),
                                wz.cols(),
                                w,
                                prev
                            ),
                        });
                    }
                }
                (None, _) => {}
            }
            if !layer.g.is_valid() {
                return Err(IcnnError::InvalidStructure {
                    layer: i,
                    what: "activation shift must be non-negative".into(),
                });
            }
            prev = w;
        }
        if prev != 1 {
            return Err(IcnnError::InvalidStructure {
                layer: self.layers.len() - 1,
                what: format!("output width is {prev}, expected 1"),
            });
        }
        Ok(())
    }

    /// Clamp every sign-constrained weight up to 0. Idempotent.
    pub fn project_feasible(&mut self) {
        let mpc = self.mode == Mode::Mpc;
        for layer in &mut self.layers {
            if let Some(wz) = &mut layer.wz {
                clamp_nonneg(wz.data_mut());
            }
            if mpc {
                clamp_nonneg(layer.wy.data_mut());
            }
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.wz.as_ref().map_or(0, |m| m.data().len()) + l.wy.data().len() + l.b.len()
            })
            .sum()
    }

    /// Fixed traversal order per layer: `wz` (row-major, when present), `wy`,
    /// `b`. The flat vector, the non-negativity mask and `set_from_flat` all
    /// share this order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for layer in &self.layers {
            if let Some(wz) = &layer.wz {
                out.extend_from_slice(wz.data());
            }
            out.extend_from_slice(layer.wy.data());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.weight_count(), "flat weight vector has wrong length");
        let mut k = 0usize;
        for layer in &mut self.layers {
            if let Some(wz) = &mut layer.wz {
                let n = wz.data().len();
                wz.data_mut().copy_from_slice(&flat[k..k + n]);
                k += n;
            }
            let n = layer.wy.data().len();
            layer.wy.data_mut().copy_from_slice(&flat[k..k + n]);
            k += n;
            let n = layer.b.len();
            layer.b.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }

    pub fn nonneg_mask(&self) -> Vec<bool> {
        let mpc = self.mode == Mode::Mpc;
        let mut out = Vec::with_capacity(self.weight_count());
        for layer in &self.layers {
            if let Some(wz) = &layer.wz {
                out.extend(std::iter::repeat(true).take(wz.data().len()));
            }
            out.extend(std::iter::repeat(mpc).take(layer.wy.data().len()));
            out.extend(std::iter::repeat(false).take(layer.b.len()));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        FicnnParams {
            mode: self.mode,
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| FicnnLayer {
                    wz: l.wz.as_ref().map(|m| Mat::zeros(m.rows(), m.cols())),
                    wy: Mat::zeros(l.wy.rows(), l.wy.cols()),
                    b: vec![0.0; l.b.len()],
                    g: l.g,
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.width()).collect()
    }
}

fn clamp_nonneg(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub(crate) fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.random_range(-a..a);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// max(y1 + 2·y2, 0) with an explicit hidden layer.
    fn two_layer_relu_net(mode: Mode) -> FicnnParams {
        FicnnParams {
            mode,
            input_dim: 2,
            layers: vec![
                FicnnLayer {
                    wz: None,
                    wy: Mat::from_rows(&[vec![1.0, 2.0]]),
                    b: vec![0.0],
                    g: Activation::Relu,
                },
                FicnnLayer {
                    wz: Some(Mat::from_rows(&[vec![1.0]])),
                    wy: Mat::from_rows(&[vec![0.0, 0.0]]),
                    b: vec![0.0],
                    g: Activation::Identity,
                },
            ],
        }
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let p = two_layer_relu_net(Mode::Mpc);
        p.validate().unwrap();
        assert_eq!(p.forward(&[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(p.forward(&[-5.0, 1.0]).unwrap(), 0.0);
    }

    /// With all weights and biases zero the only contribution is the output
    /// shift: max(0, 0) - beta.
    #[test]
    fn zero_net_outputs_minus_shift() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = FicnnParams::init(
            Mode::Mpc,
            3,
            &[4, 1],
            Activation::Relu,
            Activation::ShiftedRelu(0.8),
            &mut rng,
        );
        p.set_from_flat(&vec![0.0; p.weight_count()]);
        for y in [[0.0, 0.0, 0.0], [1.0, -2.0, 7.5]] {
            assert_eq!(p.forward(&y).unwrap(), -0.8);
        }
    }

    #[test]
    fn one_layer_affine() {
        let p = FicnnParams {
            mode: Mode::Amos,
            input_dim: 1,
            layers: vec![FicnnLayer {
                wz: None,
                wy: Mat::from_rows(&[vec![2.0]]),
                b: vec![-1.0],
                g: Activation::Identity,
            }],
        };
        assert_eq!(p.forward(&[3.0]).unwrap(), 5.0);
    }

    /// Two parallel hidden units summed by the output layer: 2·max(y, 0).
    #[test]
    fn forward_sums_hidden_units() {
        let p = FicnnParams {
            mode: Mode::Mpc,
            input_dim: 1,
            layers: vec![
                FicnnLayer {
                    wz: None,
                    wy: Mat::from_rows(&[vec![1.0], vec![1.0]]),
                    b: vec![0.0, 0.0],
                    g: Activation::Relu,
                },
                FicnnLayer {
                    wz: Some(Mat::from_rows(&[vec![1.0, 1.0]])),
                    wy: Mat::from_rows(&[vec![0.0]]),
                    b: vec![0.0],
                    g: Activation::Identity,
                },
            ],
        };
        p.validate().unwrap();
        assert_eq!(p.forward(&[-2.0]).unwrap(), 0.0);
        assert_eq!(p.forward(&[2.0]).unwrap(), 4.0);
    }

    #[test]
    fn input_dim_mismatch_names_layer() {
        let p = two_layer_relu_net(Mode::Mpc);
        let err = p.forward(&[1.0]).unwrap_err();
        assert!(matches!(err, IcnnError::DimMismatch { layer: 0, expected: 2, got: 1, .. }));
    }

    #[test]
    fn projection_clamps_by_mode() {
        let mut amos = two_layer_relu_net(Mode::Amos);
        amos.layers[0].wy.set(0, 0, -3.0);
        amos.layers[1].wz.as_mut().unwrap().set(0, 0, -1.0);
        amos.project_feasible();
        // Amos leaves wy alone but clamps wz.
        assert_eq!(amos.layers[0].wy.at(0, 0), -3.0);
        assert_eq!(amos.layers[1].wz.as_ref().unwrap().at(0, 0), 0.0);

        let mut mpc = two_layer_relu_net(Mode::Mpc);
        mpc.layers[0].wy.set(0, 0, -3.0);
        mpc.project_feasible();
        assert_eq!(mpc.layers[0].wy.at(0, 0), 0.0);
        // Idempotent.
        let flat = mpc.flatten();
        mpc.project_feasible();
        assert_eq!(flat, mpc.flatten());
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p = FicnnParams::init(
            Mode::Mpc,
            3,
            &[4, 4, 1],
            Activation::Relu,
            Activation::ShiftedRelu(0.5),
            &mut rng,
        );
        let flat = p.flatten();
        assert_eq!(flat.len(), p.weight_count());
        let mut q = p.zeros_like();
        q.set_from_flat(&flat);
        assert_eq!(p, q);
        assert_eq!(p.nonneg_mask().len(), flat.len());
    }
}
