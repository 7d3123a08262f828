//! Input standardisation.
//!
//! Features are z-scored with statistics fitted on training data only.
//! Scales are strictly positive (a constant column falls back to scale 1),
//! so standardisation is a positive affine map per coordinate: it preserves
//! both convexity and the non-decreasing property of the network that
//! consumes the standardised inputs. Targets are left in physical units so
//! the output activation's shift keeps its physical meaning.

/// Per-coordinate `(x - mean) / scale` with `scale > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ZScore {
    /// Fit population mean and standard deviation over `rows`, each of
    /// length `dim`. Columns with (near-)zero spread get scale 1 so the
    /// transform stays invertible.
    pub fn fit<'a, I>(dim: usize, rows: I) -> ZScore
    where
        I: Iterator<Item = &'a [f64]> + Clone,
    {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows.clone() {
            assert_eq!(row.len(), dim, "row length mismatch while fitting");
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
            n += 1;
        }
        if n == 0 {
            return ZScore::identity(dim);
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(row) {
                let d = x - m;
                *v += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        ZScore { mean, scale }
    }

    pub fn identity(dim: usize) -> ZScore {
        ZScore { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        debug_assert_eq!(out.len(), self.mean.len());
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.scale[i];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }
}

/// Standardisation for the two input groups of a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub y: ZScore,
    pub ytilde: ZScore,
}

impl Normalizer {
    pub fn identity(y_dim: usize, ytilde_dim: usize) -> Normalizer {
        Normalizer { y: ZScore::identity(y_dim), ytilde: ZScore::identity(ytilde_dim) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_matches_hand_computation() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 10.0], vec![3.0, 10.0]];
        let z = ZScore::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(z.mean, vec![2.0, 10.0]);
        assert_eq!(z.scale[0], 1.0); // population std of {1,3}
        assert_eq!(z.scale[1], 1.0); // constant column falls back to 1
        assert_eq!(z.apply(&[3.0, 10.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn scales_are_always_positive() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64, 5.0, -i as f64]).collect();
        let z = ZScore::fit(3, rows.iter().map(|r| r.as_slice()));
        assert!(z.scale.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn empty_fit_is_identity() {
        let z = ZScore::fit(4, std::iter::empty());
        assert_eq!(z, ZScore::identity(4));
    }
}
