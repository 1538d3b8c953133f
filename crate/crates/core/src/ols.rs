//! Plain OLS fit of the included design, solved independently of the
//! closed-form machinery so the Monte-Carlo paths can check it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{pivoted_qr, PivotedQr, PROJECTION_RANK_TOL};

/// Reusable factorization of a fixed design `X`.
#[derive(Debug, Clone)]
pub(crate) struct OlsDesign {
    qr: PivotedQr,
    n: usize,
    /// `[(XᵗX)⁻¹]₁₁`, for the standard error of the first coefficient.
    inv11: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct OlsFit {
    pub tau_hat: f64,
    pub std_err: f64,
    pub df: usize,
}

impl OlsDesign {
    pub(crate) fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        let qr = pivoted_qr(x, PROJECTION_RANK_TOL);
        if qr.rank < p {
            return Err(Error::SingularDesign { rcond: 0.0 });
        }
        // first row of R⁻¹ under the pivot, via unit vector solve
        let e1 = {
            let mut e = DVector::zeros(p);
            let pos = qr.perm.iter().position(|&c| c == 0).expect("column 0 present");
            e[pos] = 1.0;
            e
        };
        // (XᵗX)⁻¹ = P R⁻¹ R⁻ᵗ Pᵗ, so [·]₁₁ = ‖R⁻ᵗ e‖²
        let mut y = DVector::zeros(p);
        for i in 0..p {
            let mut acc = e1[i];
            for j in 0..i {
                acc -= qr.r[(j, i)] * y[j];
            }
            y[i] = acc / qr.r[(i, i)];
        }
        Ok(Self {
            inv11: y.norm_squared(),
            qr,
            n,
        })
    }

    pub(crate) fn fit(&self, y: &DVector<f64>) -> OlsFit {
        let p = self.qr.rank;
        let beta = self.qr.solve_least_squares(y);
        let fitted = &self.qr.q * (self.qr.q.transpose() * y);
        let rss = (y - fitted).norm_squared();
        let df = self.n - p;
        let s2 = rss / df as f64;
        OlsFit {
            tau_hat: beta[0],
            std_err: (s2 * self.inv11).sqrt(),
            df,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_normal_equations() {
        let x = DMatrix::from_row_slice(
            6,
            3,
            &[1.0, 1.0, 0.3, 1.0, 1.0, -1.2, 1.0, 1.0, 2.0, 0.0, 1.0, 0.1, 0.0, 1.0, 0.7, 0.0, 1.0, -0.4],
        );
        let y = DVector::from_column_slice(&[1.0, 2.5, -0.3, 0.2, 1.1, 0.9]);
        let xtx = x.transpose() * &x;
        let inv = xtx.clone().try_inverse().unwrap();
        let beta = &inv * x.transpose() * &y;
        let design = OlsDesign::new(&x).unwrap();
        let fit = design.fit(&y);
        assert!((fit.tau_hat - beta[0]).abs() < 1e-12);
        let rss = (&y - &x * &beta).norm_squared();
        let se = (rss / 3.0 * inv[(0, 0)]).sqrt();
        assert!((fit.std_err - se).abs() < 1e-12);
        assert_eq!(fit.df, 3);
    }
}
