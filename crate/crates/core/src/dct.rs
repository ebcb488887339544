//! Orthonormal 2-D DCT-II and its inverse over square `d×d` slices.

use crate::error::{contract, Result};
use crate::tensor::Tensor4;

/// Cosine basis for one filter size. `basis[j*d + i] = s_j·cos(π/d·(i+½)·j)`
/// with `s_0 = sqrt(1/d)` and `s_j = sqrt(2/d)` otherwise, so the matrix is
/// orthogonal and `dct2(V) = B·V·Bᵀ`, `idct2(F) = Bᵀ·F·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct DctPlan {
    d: usize,
    basis: Vec<f64>,
}

impl DctPlan {
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "DCT size must be positive");
        let mut basis = vec![0.0; d * d];
        for j in 0..d {
            let s = scale(d, j);
            for i in 0..d {
                basis[j * d + i] =
                    s * (std::f64::consts::PI / d as f64 * (i as f64 + 0.5) * j as f64).cos();
            }
        }
        Self { d, basis }
    }

    pub fn size(&self) -> usize {
        self.d
    }

    /// Row-major `d×d` basis matrix.
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// Forward transform of one row-major `d×d` slice into `out`.
    pub fn forward_into(&self, v: &[f64], out: &mut [f64]) {
        self.sandwich(v, out, false);
    }

    /// Inverse transform of one row-major `d×d` slice into `out`.
    pub fn inverse_into(&self, f: &[f64], out: &mut [f64]) {
        self.sandwich(f, out, true);
    }

    // out = B·X·Bᵀ (forward) or Bᵀ·X·B (inverse)
    fn sandwich(&self, x: &[f64], out: &mut [f64], inverse: bool) {
        let d = self.d;
        debug_assert!(x.len() == d * d && out.len() == d * d);
        let b = |r: usize, c: usize| {
            if inverse {
                self.basis[c * d + r]
            } else {
                self.basis[r * d + c]
            }
        };
        let mut tmp = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += b(r, k) * x[k * d + c];
                }
                tmp[r * d + c] = acc;
            }
        }
        for r in 0..d {
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += tmp[r * d + k] * b(c, k);
                }
                out[r * d + c] = acc;
            }
        }
    }

    pub fn dct2(&self, v: &[f64]) -> Result<Vec<f64>> {
        contract!(
            v.len() == self.d * self.d,
            "slice of {} values does not fit a {}×{} plan",
            v.len(),
            self.d,
            self.d
        );
        let mut out = vec![0.0; v.len()];
        self.forward_into(v, &mut out);
        Ok(out)
    }

    pub fn idct2(&self, f: &[f64]) -> Result<Vec<f64>> {
        contract!(
            f.len() == self.d * self.d,
            "slice of {} values does not fit a {}×{} plan",
            f.len(),
            self.d,
            self.d
        );
        let mut out = vec![0.0; f.len()];
        self.inverse_into(f, &mut out);
        Ok(out)
    }

    /// Applies [`DctPlan::dct2`] to every `(l, k)` slice of a filter bank.
    pub fn dct2_batch(&self, t: &Tensor4) -> Result<Tensor4> {
        self.batch(t, false)
    }

    pub fn idct2_batch(&self, t: &Tensor4) -> Result<Tensor4> {
        self.batch(t, true)
    }

    fn batch(&self, t: &Tensor4, inverse: bool) -> Result<Tensor4> {
        let [_, _, r, c] = t.dims();
        contract!(
            r == self.d && c == self.d,
            "tensor slices are {r}×{c}, plan is {}×{}",
            self.d,
            self.d
        );
        let mut out = Tensor4::zeros(t.dims());
        let dd = self.d * self.d;
        for (src, dst) in t.data().chunks(dd).zip(out.data_mut().chunks_mut(dd)) {
            self.sandwich(src, dst, inverse);
        }
        Ok(out)
    }
}

/// Normalisation `s_j` of the orthonormal DCT-II.
pub fn scale(d: usize, j: usize) -> f64 {
    if j == 0 {
        (1.0 / d as f64).sqrt()
    } else {
        (2.0 / d as f64).sqrt()
    }
}
