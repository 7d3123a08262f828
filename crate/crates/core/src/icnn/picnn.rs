//! Partially input-convex network.
//!
//! Two coupled paths. The nonconvex path `v` is an ordinary feed-forward
//! chain driven by the free inputs `ỹ` (`v_0 = ỹ`); the convex path `z`
//! carries the convex inputs `y` and is *modulated* by `v` through
//! elementwise (Hadamard) gates:
//!
//! ```text
//! v_{i+1} = g̃_i( W̃_i · v_i + b̃_i )
//! z_{i+1} = g_i( Wz_i · (z_i ∘ gzv_i(Wzv_i · v_i + bz_i))
//!              + Wy_i · (y  ∘ gyv_i(Wyv_i · v_i + by_i))
//!              + Wv_i · v_i + b_i )
//! ```
//!
//! `z_0` is empty, so layer 0 has no `wz`/`wzv`/`bz` block. For fixed `ỹ`
//! the gate factors are constants; with `Wz_i >= 0` the output is convex in
//! `y` (Amos mode, gates pass through unchanged). Mpc mode wraps the gates
//! in ReLU so the factors are also non-negative, and constrains `Wy_i >= 0`,
//! which makes the output non-decreasing in `y` on top of convex — the
//! property that lets rollouts compose safely.

use rand::Rng;

use super::ficnn::glorot;
use super::{IcnnError, Mode};
use crate::activation::Activation;
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct PicnnLayer {
    /// Nonconvex-path update to `v_{i+1}`; absent on the last layer, whose
    /// `v` is not consumed by anything.
    pub w_tilde: Option<Mat>,
    pub b_tilde: Option<Vec<f64>>,
    pub g_tilde: Activation,
    /// Convex-path propagation; absent on layer 0.
    pub wz: Option<Mat>,
    pub wzv: Option<Mat>,
    pub bz: Option<Vec<f64>>,
    /// Convex-input injection and its gate.
    pub wy: Mat,
    pub wyv: Mat,
    pub by: Vec<f64>,
    /// Direct nonconvex-path contribution.
    pub wv: Mat,
    pub b: Vec<f64>,
    pub g: Activation,
    pub g_zv: Activation,
    pub g_yv: Activation,
}

impl PicnnLayer {
    fn width(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicnnParams {
    pub mode: Mode,
    pub y_dim: usize,
    pub ytilde_dim: usize,
    pub layers: Vec<PicnnLayer>,
}

impl PicnnParams {
    /// Random initialisation mirroring the fully-convex variant: matrices
    /// Glorot-uniform, plain biases zero, then projected feasible.
    ///
    /// Gate biases (`by`, `bz`) start at 1 instead of 0 so the Hadamard
    /// factors open at identity strength: with ReLU gates a zero start would
    /// pin the gate output — and its gradient — at exactly zero, permanently
    /// killing the convex path.
    pub fn init<R: Rng>(
        mode: Mode,
        y_dim: usize,
        ytilde_dim: usize,
        widths: &[usize],
        v_widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(!widths.is_empty() && *widths.last().unwrap() == 1, "output width must be 1");
        assert_eq!(v_widths.len(), widths.len() - 1, "one v width per non-final layer");
        let (g_zv, g_yv) = gate_activations(mode);
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev_z = 0usize;
        let mut prev_v = ytilde_dim;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let g = if last { output } else { hidden };
            let v_next = if last { 0 } else { v_widths[i] };
            layers.push(PicnnLayer {
                w_tilde: (!last).then(|| glorot(v_next, prev_v, rng)),
                b_tilde: (!last).then(|| vec![0.0; v_next]),
                g_tilde: Activation::Relu,
                wz: (i > 0).then(|| glorot(w, prev_z, rng)),
                wzv: (i > 0).then(|| glorot(prev_z, prev_v, rng)),
                bz: (i > 0).then(|| vec![1.0; prev_z]),
                wy: glorot(w, y_dim, rng),
                wyv: glorot(y_dim, prev_v, rng),
                by: vec![1.0; y_dim],
                wv: glorot(w, prev_v, rng),
                b: vec![0.0; w],
                g,
                g_zv,
                g_yv,
            });
            prev_z = w;
            if !last {
                prev_v = v_next;
            }
        }
        let mut p = PicnnParams { mode, y_dim, ytilde_dim, layers };
        p.project_feasible();
        p
    }

    pub fn forward(&self, y: &[f64], ytilde: &[f64]) -> Result<f64, IcnnError> {
        if y.len() != self.y_dim {
            return Err(IcnnError::DimMismatch {
                layer: 0,
                what: "input y",
                expected: self.y_dim,
                got: y.len(),
            });
        }
        if ytilde.len() != self.ytilde_dim {
            return Err(IcnnError::DimMismatch {
                layer: 0,
                what: "input ytilde",
                expected: self.ytilde_dim,
                got: ytilde.len(),
            });
        }
        let (want_zv, want_yv) = gate_activations(self.mode);
        let mut v: Vec<f64> = ytilde.to_vec();
        let mut z: Vec<f64> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.g_zv != want_zv || layer.g_yv != want_yv {
                return Err(IcnnError::ModeActivation {
                    layer: i,
                    mode: self.mode,
                    what: match self.mode {
                        Mode::Mpc => "ReLU gate activations",
                        Mode::Amos => "Identity gate activations",
                    },
                });
            }
            // y-gate: y ∘ g_yv(Wyv v + by)
            let mut gate_y = layer.by.clone();
            layer.wyv.mul_vec_add(&v, &mut gate_y);
            for (gyi, yi) in gate_y.iter_mut().zip(y) {
                *gyi = layer.g_yv.apply(*gyi) * yi;
            }
            let mut t = layer.b.clone();
            layer.wy.mul_vec_add(&gate_y, &mut t);
            layer.wv.mul_vec_add(&v, &mut t);
            if let (Some(wz), Some(wzv), Some(bz)) = (&layer.wz, &layer.wzv, &layer.bz) {
                let mut gate_z = bz.clone();
                wzv.mul_vec_add(&v, &mut gate_z);
                for (gzi, zi) in gate_z.iter_mut().zip(&z) {
                    *gzi = layer.g_zv.apply(*gzi) * zi;
                }
                wz.mul_vec_add(&gate_z, &mut t);
            }
            for x in &mut t {
                *x = layer.g.apply(*x);
            }
            z = t;
            if let (Some(wt), Some(bt)) = (&layer.w_tilde, &layer.b_tilde) {
                let mut vn = bt.clone();
                wt.mul_vec_add(&v, &mut vn);
                for x in &mut vn {
                    *x = layer.g_tilde.apply(*x);
                }
                v = vn;
            }
        }
        Ok(z[0])
    }

    pub fn validate(&self) -> Result<(), IcnnError> {
        if self.layers.is_empty() {
            return Err(IcnnError::InvalidStructure { layer: 0, what: "no layers".into() });
        }
        let (want_zv, want_yv) = gate_activations(self.mode);
        let mut prev_z = 0usize;
        let mut v_dim = self.ytilde_dim;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.width();
            let mut dims = vec![
                (layer.wy.rows() == w && layer.wy.cols() == self.y_dim, "wy"),
                (layer.wyv.rows() == self.y_dim && layer.wyv.cols() == v_dim, "wyv"),
                (layer.by.len() == self.y_dim, "by"),
                (layer.wv.rows() == w && layer.wv.cols() == v_dim, "wv"),
            ];
            if i == 0 {
                if layer.wz.is_some() || layer.wzv.is_some() || layer.bz.is_some() {
                    return Err(IcnnError::InvalidStructure {
                        layer: 0,
                        what: "layer 0 must not have a z-propagation block (z_0 is empty)"
                            .into(),
                    });
                }
            } else {
                match (&layer.wz, &layer.wzv, &layer.bz) {
                    (Some(wz), Some(wzv), Some(bz)) => {
                        dims.push((wz.rows() == w && wz.cols() == prev_z, "wz"));
                        dims.push((wzv.rows() == prev_z && wzv.cols() == v_dim, "wzv"));
                        dims.push((bz.len() == prev_z, "bz"));
                    }
                    _ => {
                        return Err(IcnnError::InvalidStructure {
                            layer: i,
                            what: "incomplete z-propagation block (wz, wzv, bz)".into(),
                        })
                    }
                }
            }
            if i == last {
                if layer.w_tilde.is_some() || layer.b_tilde.is_some() {
                    return Err(IcnnError::InvalidStructure {
                        layer: i,
                        what: "last layer must not update the nonconvex path".into(),
                    });
                }
            } else {
                match (&layer.w_tilde, &layer.b_tilde) {
                    (Some(wt), Some(bt)) => {
                        dims.push((wt.cols() == v_dim && wt.rows() == bt.len(), "w_tilde"));
                        v_dim = bt.len();
                    }
                    _ => {
                        return Err(IcnnError::InvalidStructure {
                            layer: i,
                            what: "missing nonconvex-path update (w_tilde, b_tilde)".into(),
                        })
                    }
                }
            }
            if let Some((_, name)) = dims.iter().find(|(ok, _)| !ok) {
                return Err(IcnnError::InvalidStructure {
                    layer: i,
                    what: format!("{name} has inconsistent dimensions"),
                });
            }
            if !(layer.g.is_valid() && layer.g_tilde.is_valid()) {
                return Err(IcnnError::InvalidStructure {
                    layer: i,
                    what: "activation shift must be non-negative".into(),
                });
            }
            if layer.g_zv != want_zv || layer.g_yv != want_yv {
                return Err(IcnnError::ModeActivation {
                    layer: i,
                    mode: self.mode,
                    what: match self.mode {
                        Mode::Mpc => "ReLU gate activations",
                        Mode::Amos => "Identity gate activations",
                    },
                });
            }
            prev_z = w;
        }
        if prev_z != 1 {
            return Err(IcnnError::InvalidStructure {
                layer: last,
                what: format!("output width is {prev_z}, expected 1"),
            });
        }
        Ok(())
    }

    pub fn project_feasible(&mut self) {
        let mpc = self.mode == Mode::Mpc;
        for layer in &mut self.layers {
            if let Some(wz) = &mut layer.wz {
                for x in wz.data_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            if mpc {
                for x in layer.wy.data_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(layer_weight_count).sum()
    }

    /// Fixed traversal order per layer: `w_tilde`, `b_tilde`, `wz`, `wzv`,
    /// `bz`, `wy`, `wyv`, `by`, `wv`, `b` (present blocks only, matrices
    /// row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for layer in &self.layers {
            for block in mat_blocks(layer) {
                if let Some(m) = block {
                    out.extend_from_slice(m.data());
                }
            }
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.weight_count(), "flat weight vector has wrong length");
        let mut k = 0usize;
        for layer in &mut self.layers {
            for block in mat_blocks_mut(layer) {
                if let Some(data) = block {
                    let n = data.len();
                    data.copy_from_slice(&flat[k..k + n]);
                    k += n;
                }
            }
            let n = layer.b.len();
            layer.b.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }

    pub fn nonneg_mask(&self) -> Vec<bool> {
        let mpc = self.mode == Mode::Mpc;
        let mut out = Vec::with_capacity(self.weight_count());
        for layer in &self.layers {
            // Same order as `mat_blocks`: only wz (index 2) and, in Mpc
            // mode, wy (index 5) are sign-constrained.
            for (idx, block) in mat_blocks(layer).into_iter().enumerate() {
                if let Some(m) = block {
                    let constrained = idx == 2 || (mpc && idx == 5);
                    out.extend(std::iter::repeat(constrained).take(m.data().len()));
                }
            }
            out.extend(std::iter::repeat(false).take(layer.b.len()));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        PicnnParams {
            mode: self.mode,
            y_dim: self.y_dim,
            ytilde_dim: self.ytilde_dim,
            layers: self
                .layers
                .iter()
                .map(|l| PicnnLayer {
                    w_tilde: l.w_tilde.as_ref().map(zeros_of),
                    b_tilde: l.b_tilde.as_ref().map(|b| vec![0.0; b.len()]),
                    g_tilde: l.g_tilde,
                    wz: l.wz.as_ref().map(zeros_of),
                    wzv: l.wzv.as_ref().map(zeros_of),
                    bz: l.bz.as_ref().map(|b| vec![0.0; b.len()]),
                    wy: Mat::zeros(l.wy.rows(), l.wy.cols()),
                    wyv: Mat::zeros(l.wyv.rows(), l.wyv.cols()),
                    by: vec![0.0; l.by.len()],
                    wv: Mat::zeros(l.wv.rows(), l.wv.cols()),
                    b: vec![0.0; l.b.len()],
                    g: l.g,
                    g_zv: l.g_zv,
                    g_yv: l.g_yv,
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.width()).collect()
    }

    pub fn v_widths(&self) -> Vec<usize> {
        self.layers.iter().filter_map(|l| l.b_tilde.as_ref().map(|b| b.len())).collect()
    }
}

/// Gate activations demanded by each mode.
pub(crate) fn gate_activations(mode: Mode) -> (Activation, Activation) {
    match mode {
        Mode::Mpc => (Activation::Relu, Activation::Relu),
        Mode::Amos => (Activation::Identity, Activation::Identity),
    }
}

fn layer_weight_count(l: &PicnnLayer) -> usize {
    mat_blocks(l).into_iter().flatten().map(|m| m.data().len()).sum::<usize>() + l.b.len()
}

/// Matrix/vector blocks of one layer in flattening order (biases-as-vectors
/// are wrapped in 1-row matrices conceptually; here we just return slices).
fn mat_blocks(l: &PicnnLayer) -> [Option<MatOrVec<'_>>; 9] {
    [
        l.w_tilde.as_ref().map(MatOrVec::Mat),
        l.b_tilde.as_ref().map(|v| MatOrVec::Vec(v)),
        l.wz.as_ref().map(MatOrVec::Mat),
        l.wzv.as_ref().map(MatOrVec::Mat),
        l.bz.as_ref().map(|v| MatOrVec::Vec(v)),
        Some(MatOrVec::Mat(&l.wy)),
        Some(MatOrVec::Mat(&l.wyv)),
        Some(MatOrVec::Vec(&l.by)),
        Some(MatOrVec::Mat(&l.wv)),
    ]
}

fn mat_blocks_mut(l: &mut PicnnLayer) -> [Option<&mut [f64]>; 9] {
    [
        l.w_tilde.as_mut().map(|m| m.data_mut()),
        l.b_tilde.as_mut().map(|v| v.as_mut_slice()),
        l.wz.as_mut().map(|m| m.data_mut()),
        l.wzv.as_mut().map(|m| m.data_mut()),
        l.bz.as_mut().map(|v| v.as_mut_slice()),
        Some(l.wy.data_mut()),
        Some(l.wyv.data_mut()),
        Some(l.by.as_mut_slice()),
        Some(l.wv.data_mut()),
    ]
}

enum MatOrVec<'a> {
    Mat(&'a Mat),
    Vec(&'a [f64]),
}

impl MatOrVec<'_> {
    fn data(&self) -> &[f64] {
        match self {
            MatOrVec::Mat(m) => m.data(),
            MatOrVec::Vec(v) => v,
        }
    }
}

fn zeros_of(m: &Mat) -> Mat {
    Mat::zeros(m.rows(), m.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Single-layer net: z = Wy·(y ∘ gyv(Wyv·ỹ + by)) + Wv·ỹ + b.
    fn gate_net(mode: Mode, by: f64) -> PicnnParams {
        let (g_zv, g_yv) = gate_activations(mode);
        PicnnParams {
            mode,
            y_dim: 1,
            ytilde_dim: 1,
            layers: vec![PicnnLayer {
                w_tilde: None,
                b_tilde: None,
                g_tilde: Activation::Relu,
                wz: None,
                wzv: None,
                bz: None,
                wy: Mat::from_rows(&[vec![1.0]]),
                wyv: Mat::from_rows(&[vec![1.0]]),
                by: vec![by],
                wv: Mat::from_rows(&[vec![0.0]]),
                b: vec![0.0],
                g: Activation::Identity,
                g_zv,
                g_yv,
            }],
        }
    }

    #[test]
    fn closed_gate_kills_the_y_path() {
        // Gate pre-activation 1·1 + (-5) = -4, ReLU clamps it to 0.
        let p = gate_net(Mode::Mpc, -5.0);
        p.validate().unwrap();
        for y in [-10.0, 0.0, 3.0, 42.0] {
            assert_eq!(p.forward(&[y], &[1.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn open_gate_scales_the_input() {
        let p = gate_net(Mode::Mpc, 0.0);
        // Gate = ReLU(1·2 + 0) = 2, so z = 1·(3·2) = 6.
        assert_eq!(p.forward(&[3.0], &[2.0]).unwrap(), 6.0);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PicnnParams::init(
            Mode::Mpc,
            2,
            3,
            &[4, 4, 1],
            &[3, 3],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        p.set_from_flat(&vec![0.0; p.weight_count()]);
        assert_eq!(p.forward(&[1.0, -2.0], &[0.5, 0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn wrong_gate_activation_is_rejected() {
        let mut p = gate_net(Mode::Mpc, 0.0);
        p.layers[0].g_yv = Activation::Identity;
        assert!(matches!(
            p.forward(&[1.0], &[1.0]),
            Err(IcnnError::ModeActivation { layer: 0, mode: Mode::Mpc, .. })
        ));
        assert!(p.validate().is_err());
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let p = gate_net(Mode::Amos, 0.0);
        assert!(matches!(
            p.forward(&[1.0, 2.0], &[1.0]),
            Err(IcnnError::DimMismatch { what: "input y", .. })
        ));
        assert!(matches!(
            p.forward(&[1.0], &[]),
            Err(IcnnError::DimMismatch { what: "input ytilde", .. })
        ));
    }

    #[test]
    fn flatten_round_trips_and_mask_lines_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PicnnParams::init(
            Mode::Mpc,
            5,
            6,
            &[9, 9, 9, 1],
            &[9, 9, 9],
            Activation::Relu,
            Activation::ShiftedRelu(0.8),
            &mut rng,
        );
        p.validate().unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.weight_count());
        let mut q = p.zeros_like();
        q.set_from_flat(&flat);
        assert_eq!(p, q);

        // Every constrained entry non-negative after init's projection.
        let mask = p.nonneg_mask();
        assert_eq!(mask.len(), flat.len());
        assert!(flat.iter().zip(&mask).all(|(v, m)| !m || *v >= 0.0));
        crate::icnn::IcnnParams::Picnn(p).check_feasible().unwrap();
    }
}
