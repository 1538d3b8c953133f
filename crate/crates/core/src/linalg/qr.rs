//! Householder QR with column pivoting, truncated at a relative rank
//! tolerance.

use nalgebra::{DMatrix, DVector};

/// `A P = Q R` restricted to the leading `rank` pivots.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Orthonormal basis of the numerical column space, `n×rank`.
    pub q: DMatrix<f64>,
    /// Upper-trapezoidal factor, `rank×m`, columns in pivoted order.
    pub r: DMatrix<f64>,
    /// `perm[k]` is the original column placed at position `k`.
    pub perm: Vec<usize>,
    pub rank: usize,
}

/// Factorizes `a`, stopping once the largest remaining column norm falls to
/// `rel_tol` times the largest original column norm or below.
pub fn pivoted_qr(a: &DMatrix<f64>, rel_tol: f64) -> PivotedQr {
    let (n, m) = a.shape();
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..m).collect();
    let steps = n.min(m);
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(steps);

    let col_norm = |w: &DMatrix<f64>, j: usize, from: usize| w.view((from, j), (n - from, 1)).norm();
    let reference = (0..m).map(|j| col_norm(&work, j, 0)).fold(0.0, f64::max);
    let mut rank = 0;

    if reference > 0.0 {
        for k in 0..steps {
            // Norms are recomputed each step; the matrices here are narrow.
            let (best, best_norm) = (k..m)
                .map(|j| (j, col_norm(&work, j, k)))
                .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if best_norm <= rel_tol * reference {
                break;
            }
            work.swap_columns(k, best);
            perm.swap(k, best);

            let mut v = work.view((k, k), (n - k, 1)).clone_owned().column(0).into_owned();
            let alpha = if v[0] >= 0.0 { -best_norm } else { best_norm };
            v[0] -= alpha;
            let vnorm = v.norm();
            if vnorm > 0.0 {
                v /= vnorm;
                for j in k..m {
                    let mut col = work.view_mut((k, j), (n - k, 1));
                    let dot = v.dot(&col.column(0));
                    col.column_mut(0).axpy(-2.0 * dot, &v, 1.0);
                }
            }
            reflectors.push(v);
            rank += 1;
        }
    }

    let r = DMatrix::from_fn(rank, m, |i, j| if j >= i { work[(i, j)] } else { 0.0 });

    let mut q = DMatrix::zeros(n, rank);
    for i in 0..rank {
        q[(i, i)] = 1.0;
    }
    for (k, v) in reflectors.iter().enumerate().rev() {
        for j in 0..rank {
            let mut col = q.view_mut((k, j), (n - k, 1));
            let dot = v.dot(&col.column(0));
            col.column_mut(0).axpy(-2.0 * dot, v, 1.0);
        }
    }

    PivotedQr { q, r, perm, rank }
}

impl PivotedQr {
    /// Least-squares coefficients for `a x ≈ b` on the retained pivots;
    /// dropped columns get coefficient zero.
    pub fn solve_least_squares(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = self.perm.len();
        let c = self.q.transpose() * b;
        let mut y = DVector::zeros(self.rank);
        for i in (0..self.rank).rev() {
            let mut acc = c[i];
            for j in i + 1..self.rank {
                acc -= self.r[(i, j)] * y[j];
            }
            y[i] = acc / self.r[(i, i)];
        }
        let mut x = DVector::zeros(m);
        for (k, &col) in self.perm.iter().take(self.rank).enumerate() {
            x[col] = y[k];
        }
        x
    }

    /// Original indices of the retained (independent) columns.
    pub fn retained_columns(&self) -> Vec<usize> {
        let mut cols = self.perm[..self.rank].to_vec();
        cols.sort_unstable();
        cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_full_rank_matrix() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.5, 3.0, -1.0, 2.0, 0.0, 4.0, 1.0, 2.0, 2.0, -3.0]);
        let f = pivoted_qr(&a, 1e-10);
        assert_eq!(f.rank, 3);
        let qtq = f.q.transpose() * &f.q;
        assert!((qtq - DMatrix::identity(3, 3)).abs().max() < 1e-14);
        let ap = DMatrix::from_fn(4, 3, |i, j| a[(i, f.perm[j])]);
        assert!((ap - &f.q * &f.r).abs().max() < 1e-13);
    }

    #[test]
    fn drops_dependent_column() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 1.0, 2.0, 0.0, 2.0, 1.0, 1.0, 2.0]);
        let f = pivoted_qr(&a, 1e-10);
        assert_eq!(f.rank, 2);
        let b = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]);
        let x = f.solve_least_squares(&b);
        let resid = &b - &a * &x;
        // normal equations hold on the column space
        assert!((a.transpose() * resid).abs().max() < 1e-12);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let f = pivoted_qr(&DMatrix::zeros(3, 2), 1e-10);
        assert_eq!(f.rank, 0);
        assert_eq!(f.q.ncols(), 0);
    }
}
