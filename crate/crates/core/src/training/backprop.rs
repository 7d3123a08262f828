//! Reverse-mode gradients of the batch mean-squared error.
//!
//! The topologies are fixed, so instead of a general autodiff graph each
//! network kind gets a hand-written tape: the forward pass records
//! pre-activations and intermediate vectors into reusable buffers, the
//! backward pass walks them in reverse. Gradients accumulate into a
//! parameter-shaped structure (`IcnnParams::zeros_like`), so optimizer,
//! projection and serialization all share one flat ordering.
//!
//! The partially-convex variant needs care around its Hadamard gates:
//! `u = x ∘ g(a)` contributes `du ∘ g(a)` to the carried path and
//! `du ∘ x ∘ g'(a)` to the gate pre-activation. ReLU-family subgradients at
//! the kink are taken as 0, matching `Activation::grad`.
//!
//! `min_kink_gap` reports how close any ReLU-family pre-activation came to
//! its corner during the forward passes. Finite-difference checks are
//! meaningless across a kink, so oracles use it to discard ill-posed draws.

use crate::activation::Activation;
use crate::icnn::{FicnnParams, IcnnError, IcnnParams, PicnnParams};

/// One training example: standardised inputs and a physical-unit target.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub y: &'a [f64],
    pub ytilde: &'a [f64],
    pub target: f64,
}

/// Gradients of the batch MSE together with the loss itself.
#[derive(Debug)]
pub struct BatchGrad {
    pub grads: IcnnParams,
    pub mse: f64,
    /// Smallest |pre-activation| seen at any ReLU-family unit (∞ if none).
    pub min_kink_gap: f64,
}

/// Mean-squared error of `params` over `batch`, without gradients.
pub fn batch_mse(params: &IcnnParams, batch: &[Sample]) -> Result<f64, IcnnError> {
    let mut acc = 0.0;
    for s in batch {
        let pred = params.forward(s.y, s.ytilde)?;
        let e = pred - s.target;
        acc += e * e;
    }
    Ok(acc / batch.len() as f64)
}

/// ∂MSE/∂w for every weight, averaged over the batch.
pub fn gradients(params: &IcnnParams, batch: &[Sample]) -> Result<BatchGrad, IcnnError> {
    assert!(!batch.is_empty(), "gradient of an empty batch");
    let mut tape = Tape::new(params);
    let mut grads = params.zeros_like();
    let mse = accumulate(params, &mut tape, &mut grads, batch)?;
    Ok(BatchGrad { grads, mse, min_kink_gap: tape.min_kink_gap() })
}

/// Forward + backward over `batch`, adding into `grads` (not zeroed here).
/// Returns the batch MSE.
pub(crate) fn accumulate(
    params: &IcnnParams,
    tape: &mut Tape,
    grads: &mut IcnnParams,
    batch: &[Sample],
) -> Result<f64, IcnnError> {
    let scale = 2.0 / batch.len() as f64;
    let mut acc = 0.0;
    for s in batch {
        let pred = match (params, &mut *tape) {
            (IcnnParams::Ficnn(p), Tape::Ficnn(t)) => t.forward(p, s.y, s.ytilde)?,
            (IcnnParams::Picnn(p), Tape::Picnn(t)) => t.forward(p, s.y, s.ytilde)?,
            _ => panic!("tape built for a different network kind"),
        };
        let err = pred - s.target;
        acc += err * err;
        let dpred = scale * err;
        match (params, &mut *tape, &mut *grads) {
            (IcnnParams::Ficnn(p), Tape::Ficnn(t), IcnnParams::Ficnn(g)) => {
                t.backward(p, g, s.y, dpred)
            }
            (IcnnParams::Picnn(p), Tape::Picnn(t), IcnnParams::Picnn(g)) => {
                t.backward(p, g, s.y, dpred)
            }
            _ => unreachable!(),
        }
    }
    Ok(acc / batch.len() as f64)
}

pub(crate) enum Tape {
    Ficnn(FicnnTape),
    Picnn(PicnnTape),
}

impl Tape {
    pub(crate) fn new(params: &IcnnParams) -> Tape {
        match params {
            IcnnParams::Ficnn(p) => Tape::Ficnn(FicnnTape::new(p)),
            IcnnParams::Picnn(p) => Tape::Picnn(PicnnTape::new(p)),
        }
    }

    pub(crate) fn min_kink_gap(&self) -> f64 {
        match self {
            Tape::Ficnn(t) => t.min_kink_gap,
            Tape::Picnn(t) => t.min_kink_gap,
        }
    }

}

#[inline]
fn track_kink(min_gap: &mut f64, g: Activation, x: f64) {
    if !matches!(g, Activation::Identity) {
        let gap = x.abs();
        if gap < *min_gap {
            *min_gap = gap;
        }
    }
}

pub(crate) struct FicnnTape {
    /// Pre-activations per layer.
    t: Vec<Vec<f64>>,
    /// Post-activations per layer.
    z: Vec<Vec<f64>>,
    /// Backward buffer: dL/dz per layer.
    dz: Vec<Vec<f64>>,
    min_kink_gap: f64,
}

impl FicnnTape {
    fn new(p: &FicnnParams) -> Self {
        let widths: Vec<usize> = p.layers.iter().map(|l| l.b.len()).collect();
        FicnnTape {
            t: widths.iter().map(|&w| vec![0.0; w]).collect(),
            z: widths.iter().map(|&w| vec![0.0; w]).collect(),
            dz: widths.iter().map(|&w| vec![0.0; w]).collect(),
            min_kink_gap: f64::INFINITY,
        }
    }

    fn forward(&mut self, p: &FicnnParams, y: &[f64], ytilde: &[f64]) -> Result<f64, IcnnError> {
        if y.len() != p.input_dim || !ytilde.is_empty() {
            // Reuse the library's error reporting for malformed inputs.
            return IcnnParams::Ficnn(p.clone()).forward(y, ytilde);
        }
        for (i, layer) in p.layers.iter().enumerate() {
            let t = &mut self.t[i];
            t.copy_from_slice(&layer.b);
            layer.wy.mul_vec_add(y, t);
            if let Some(wz) = &layer.wz {
                wz.mul_vec_add(&self.z[i - 1], t);
            }
            for (zj, tj) in self.z[i].iter_mut().zip(self.t[i].iter()) {
                track_kink(&mut self.min_kink_gap, layer.g, *tj);
                *zj = layer.g.apply(*tj);
            }
        }
        Ok(self.z[p.layers.len() - 1][0])
    }

    fn backward(&mut self, p: &FicnnParams, grads: &mut FicnnParams, y: &[f64], dpred: f64) {
        let last = p.layers.len() - 1;
        for buf in &mut self.dz {
            buf.fill(0.0);
        }
        self.dz[last][0] = dpred;
        for i in (0..p.layers.len()).rev() {
            let layer = &p.layers[i];
            let glayer = &mut grads.layers[i];
            // dt = dz ∘ g'(t), folded into dz in place.
            for (d, tj) in self.dz[i].iter_mut().zip(&self.t[i]) {
                *d *= layer.g.grad(*tj);
            }
            let (dz_lo, dz_hi) = self.dz.split_at_mut(i);
            let dt = &dz_hi[0];
            for (gb, d) in glayer.b.iter_mut().zip(dt) {
                *gb += d;
            }
            glayer.wy.add_outer(dt, y);
            if let (Some(wz), Some(gwz)) = (&layer.wz, &mut glayer.wz) {
                gwz.add_outer(dt, &self.z[i - 1]);
                wz.tr_mul_vec_add(dt, &mut dz_lo[i - 1]);
            }
        }
    }
}

pub(crate) struct PicnnTape {
    /// v entering each layer (v[0] = ỹ).
    v: Vec<Vec<f64>>,
    /// Pre-activations of v[i+1], for i < L−1.
    s: Vec<Vec<f64>>,
    /// y-gate pre-activations and gated inputs, per layer.
    a_y: Vec<Vec<f64>>,
    u_y: Vec<Vec<f64>>,
    /// z-gate tape, per layer (empty at layer 0).
    a_z: Vec<Vec<f64>>,
    h_z: Vec<Vec<f64>>,
    u_z: Vec<Vec<f64>>,
    /// Main-path pre/post activations.
    t: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    /// Backward buffers.
    dz: Vec<Vec<f64>>,
    dv: Vec<Vec<f64>>,
    du_y: Vec<f64>,
    da_y: Vec<f64>,
    du_z: Vec<f64>,
    da_z: Vec<f64>,
    min_kink_gap: f64,
}

impl PicnnTape {
    fn new(p: &PicnnParams) -> Self {
        let widths: Vec<usize> = p.layers.iter().map(|l| l.b.len()).collect();
        let mut v_dims = vec![p.ytilde_dim];
        for layer in &p.layers {
            if let Some(bt) = &layer.b_tilde {
                v_dims.push(bt.len());
            }
        }
        let max_w = *widths.iter().max().unwrap();
        let zeros = |dims: &[usize]| dims.iter().map(|&d| vec![0.0; d]).collect::<Vec<_>>();
        let prev_w: Vec<usize> =
            std::iter::once(0).chain(widths.iter().copied()).take(widths.len()).collect();
        PicnnTape {
            v: zeros(&v_dims),
            s: zeros(&v_dims[1..]),
            a_y: (0..widths.len()).map(|_| vec![0.0; p.y_dim]).collect(),
            u_y: (0..widths.len()).map(|_| vec![0.0; p.y_dim]).collect(),
            a_z: zeros(&prev_w),
            h_z: zeros(&prev_w),
            u_z: zeros(&prev_w),
            t: zeros(&widths),
            z: zeros(&widths),
            dz: zeros(&widths),
            dv: zeros(&v_dims),
            du_y: vec![0.0; p.y_dim],
            da_y: vec![0.0; p.y_dim],
            du_z: vec![0.0; max_w],
            da_z: vec![0.0; max_w],
            min_kink_gap: f64::INFINITY,
        }
    }

    fn forward(&mut self, p: &PicnnParams, y: &[f64], ytilde: &[f64]) -> Result<f64, IcnnError> {
        if y.len() != p.y_dim || ytilde.len() != p.ytilde_dim {
            return IcnnParams::Picnn(p.clone()).forward(y, ytilde);
        }
        self.v[0].copy_from_slice(ytilde);
        for (i, layer) in p.layers.iter().enumerate() {
            // y-gate: u_y = y ∘ g_yv(Wyv v + by)
            self.a_y[i].copy_from_slice(&layer.by);
            layer.wyv.mul_vec_add(&self.v[i], &mut self.a_y[i]);
            for j in 0..p.y_dim {
                track_kink(&mut self.min_kink_gap, layer.g_yv, self.a_y[i][j]);
                self.u_y[i][j] = y[j] * layer.g_yv.apply(self.a_y[i][j]);
            }
            let t = &mut self.t[i];
            t.copy_from_slice(&layer.b);
            layer.wy.mul_vec_add(&self.u_y[i], t);
            layer.wv.mul_vec_add(&self.v[i], t);
            if let (Some(wz), Some(wzv), Some(bz)) = (&layer.wz, &layer.wzv, &layer.bz) {
                // z-gate: u_z = z_{i−1} ∘ g_zv(Wzv v + bz)
                self.a_z[i].copy_from_slice(bz);
                wzv.mul_vec_add(&self.v[i], &mut self.a_z[i]);
                for j in 0..self.a_z[i].len() {
                    track_kink(&mut self.min_kink_gap, layer.g_zv, self.a_z[i][j]);
                    self.h_z[i][j] = layer.g_zv.apply(self.a_z[i][j]);
                    self.u_z[i][j] = self.z[i - 1][j] * self.h_z[i][j];
                }
                wz.mul_vec_add(&self.u_z[i], t);
            }
            for (zj, tj) in self.z[i].iter_mut().zip(self.t[i].iter()) {
                track_kink(&mut self.min_kink_gap, layer.g, *tj);
                *zj = layer.g.apply(*tj);
            }
            if let (Some(wt), Some(bt)) = (&layer.w_tilde, &layer.b_tilde) {
                self.s[i].copy_from_slice(bt);
                wt.mul_vec_add(&self.v[i], &mut self.s[i]);
                for j in 0..self.s[i].len() {
                    track_kink(&mut self.min_kink_gap, layer.g_tilde, self.s[i][j]);
                    self.v[i + 1][j] = layer.g_tilde.apply(self.s[i][j]);
                }
            }
        }
        Ok(self.z[p.layers.len() - 1][0])
    }

    fn backward(&mut self, p: &PicnnParams, grads: &mut PicnnParams, y: &[f64], dpred: f64) {
        let last = p.layers.len() - 1;
        for buf in &mut self.dz {
            buf.fill(0.0);
        }
        for buf in &mut self.dv {
            buf.fill(0.0);
        }
        self.dz[last][0] = dpred;
        for i in (0..p.layers.len()).rev() {
            let layer = &p.layers[i];
            let glayer = &mut grads.layers[i];
            // The v-chain above this layer is fully back-propagated, so
            // dv[i+1] is complete: pull it through v_{i+1} = g̃(s_i).
            if let (Some(wt), Some(gwt), Some(gbt)) =
                (&layer.w_tilde, &mut glayer.w_tilde, &mut glayer.b_tilde)
            {
                let (dv_lo, dv_hi) = self.dv.split_at_mut(i + 1);
                let ds = &mut dv_hi[0];
                for (d, sj) in ds.iter_mut().zip(&self.s[i]) {
                    *d *= layer.g_tilde.grad(*sj);
                }
                for (gb, d) in gbt.iter_mut().zip(ds.iter()) {
                    *gb += *d;
                }
                gwt.add_outer(ds, &self.v[i]);
                wt.tr_mul_vec_add(ds, &mut dv_lo[i]);
            }
            // dt = dz ∘ g'(t), in place.
            for (d, tj) in self.dz[i].iter_mut().zip(&self.t[i]) {
                *d *= layer.g.grad(*tj);
            }
            let (dz_lo, dz_hi) = self.dz.split_at_mut(i);
            let dt = &dz_hi[0];
            for (gb, d) in glayer.b.iter_mut().zip(dt) {
                *gb += d;
            }
            glayer.wv.add_outer(dt, &self.v[i]);
            layer.wv.tr_mul_vec_add(dt, &mut self.dv[i]);
            // y-path: through Wy, then the Hadamard gate.
            glayer.wy.add_outer(dt, &self.u_y[i]);
            self.du_y.fill(0.0);
            layer.wy.tr_mul_vec_add(dt, &mut self.du_y);
            for j in 0..self.du_y.len() {
                self.da_y[j] = self.du_y[j] * y[j] * layer.g_yv.grad(self.a_y[i][j]);
            }
            for (gb, d) in glayer.by.iter_mut().zip(&self.da_y) {
                *gb += d;
            }
            glayer.wyv.add_outer(&self.da_y, &self.v[i]);
            layer.wyv.tr_mul_vec_add(&self.da_y, &mut self.dv[i]);
            // z-path: through Wz, splitting into carried z and gate.
            if let (Some(wz), Some(wzv), Some(gwz), Some(gwzv), Some(gbz)) =
                (&layer.wz, &layer.wzv, &mut glayer.wz, &mut glayer.wzv, &mut glayer.bz)
            {
                let prev_w = self.z[i - 1].len();
                gwz.add_outer(dt, &self.u_z[i]);
                let du_z = &mut self.du_z[..prev_w];
                du_z.fill(0.0);
                wz.tr_mul_vec_add(dt, du_z);
                let da_z = &mut self.da_z[..prev_w];
                for j in 0..prev_w {
                    dz_lo[i - 1][j] += du_z[j] * self.h_z[i][j];
                    da_z[j] = du_z[j] * self.z[i - 1][j] * layer.g_zv.grad(self.a_z[i][j]);
                }
                for (gb, d) in gbz.iter_mut().zip(da_z.iter()) {
                    *gb += *d;
                }
                gwzv.add_outer(da_z, &self.v[i]);
                wzv.tr_mul_vec_add(da_z, &mut self.dv[i]);
            }
        }
    }
}

/// Test-only helper: dense central finite differences of the batch MSE.
#[doc(hidden)]
pub fn fd_gradients(params: &IcnnParams, batch: &[Sample], h: f64) -> Vec<f64> {
    let flat = params.flatten();
    let mut out = vec![0.0; flat.len()];
    let mut work = params.clone();
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        work.set_from_flat(&plus);
        let lp = batch_mse(&work, batch).unwrap();
        let mut minus = flat.clone();
        minus[i] -= h;
        work.set_from_flat(&minus);
        let lm = batch_mse(&work, batch).unwrap();
        out[i] = (lp - lm) / (2.0 * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::icnn::{FicnnLayer, Mode};
    use crate::linalg::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_net(wy: f64, b: f64) -> IcnnParams {
        IcnnParams::Ficnn(FicnnParams {
            mode: Mode::Amos,
            input_dim: 1,
            layers: vec![FicnnLayer {
                wz: None,
                wy: Mat::from_rows(&[vec![wy]]),
                b: vec![b],
                g: Activation::Identity,
            }],
        })
    }

    #[test]
    fn linear_regression_gradient_by_hand() {
        let params = linear_net(0.0, 0.0);
        let batch = [Sample { y: &[1.0], ytilde: &[], target: 2.0 }];
        let out = gradients(&params, &batch).unwrap();
        let flat = out.grads.flatten(); // order: wy, b
        assert_eq!(flat, vec![-4.0, -4.0]);
        assert_eq!(out.mse, 4.0);
    }

    #[test]
    fn perfect_predictions_have_zero_gradients() {
        let params = linear_net(3.0, -1.0);
        let batch = [
            Sample { y: &[0.5], ytilde: &[], target: 0.5 },
            Sample { y: &[2.0], ytilde: &[], target: 5.0 },
        ];
        let out = gradients(&params, &batch).unwrap();
        assert!(out.grads.flatten().iter().all(|g| *g == 0.0));
        assert_eq!(out.mse, 0.0);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    fn check_family(params: &IcnnParams, y_dim: usize, yt_dim: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Central differences are invalid when a perturbation crosses a ReLU
        // corner, so redraw inputs until every pre-activation is clear of it.
        for attempt in 0..50 {
            let ys: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..y_dim).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            let yts: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..yt_dim).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            let batch: Vec<Sample> = ys
                .iter()
                .zip(&yts)
                .enumerate()
                .map(|(i, (y, yt))| Sample { y, ytilde: yt, target: (i as f64 - 2.5) * 0.3 })
                .collect();
            let out = gradients(params, &batch).unwrap();
            if out.min_kink_gap <= 1e-3 {
                continue;
            }
            let fd = fd_gradients(params, &batch, 1e-5);
            let analytic = out.grads.flatten();
            let worst = analytic
                .iter()
                .zip(&fd)
                .map(|(a, b)| rel_err(*a, *b))
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-5, "max relative error {worst} (attempt {attempt})");
            return;
        }
        panic!("no kink-free draw found in 50 attempts");
    }

    #[test]
    fn gradients_match_finite_differences_ficnn() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = FicnnParams::init(
            Mode::Mpc,
            3,
            &[4, 4, 1],
            Activation::Relu,
            Activation::ShiftedRelu(0.8),
            &mut rng,
        );
        check_family(&IcnnParams::Ficnn(p), 3, 0, 21);
    }

    #[test]
    fn gradients_match_finite_differences_picnn() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = crate::icnn::PicnnParams::init(
            Mode::Mpc,
            3,
            2,
            &[4, 4, 1],
            &[3, 3],
            Activation::Relu,
            Activation::ShiftedRelu(0.8),
            &mut rng,
        );
        check_family(&IcnnParams::Picnn(p), 3, 2, 22);
    }

    #[test]
    fn picnn_amos_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = crate::icnn::PicnnParams::init(
            Mode::Amos,
            2,
            3,
            &[5, 1],
            &[4],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        check_family(&IcnnParams::Picnn(p), 2, 3, 23);
    }
}
