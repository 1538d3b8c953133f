//! Balance summaries, the first row/column of `(XⁱᵗXⁱ)⁻¹`, and subspace
//! projections.
//!
//! Conventions follow the regression design `Xⁱ = [w | 1 | Zⁱ]`:
//!
//! - `u = mean_C(z) − mean_T(z)` (control minus treated),
//! - `d = −Σ^{-1/2} u`, with `Σ` the *overall* sample variance,
//! - `A` is the pooled within-group scatter matrix
//!   `(N_t−1)cov_T + (N_c−1)cov_C`.

mod qr;

pub use qr::{pivoted_qr, PivotedQr};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::data::{Dataset, DesignPartition};
use crate::error::{Error, Result};

/// Reciprocal condition estimate below which the design is rejected.
pub const SINGULAR_RCOND: f64 = 1e-12;
/// Relative column-drop tolerance for the pivoted QR used in projections.
pub const PROJECTION_RANK_TOL: f64 = 1e-10;
/// A residual smaller than this fraction of the original norm is treated as
/// lying inside the projection subspace.
pub const ABSORPTION_TOL: f64 = 1e-8;

/// Balance statistics for one (sub)dataset and partition.
///
/// Diagonal matrices (`Σⁱ`, `Σᵒ`) are stored as vectors of variances.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceSummary {
    pub n_treated: usize,
    pub n_control: usize,
    pub u_i: DVector<f64>,
    pub u_o: DVector<f64>,
    pub d_i: DVector<f64>,
    pub d_o: DVector<f64>,
    pub rho_i: DVector<f64>,
    pub rho_o: DVector<f64>,
    /// `Zⁱᵗw`
    pub p: DVector<f64>,
    /// `Zⁱᵗ1`
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    /// `Σⁱ^{-1/2} A Σⁱ^{-1/2} / (N−1)`
    pub lambda: DMatrix<f64>,
    pub sigma_i: DVector<f64>,
    pub sigma_o: DVector<f64>,
    pub mu_i: DVector<f64>,
    pub mu_o: DVector<f64>,
    /// Pearson correlations between included (rows) and omitted (columns).
    pub phi_io: DMatrix<f64>,
    pub cov_t: DMatrix<f64>,
    pub cov_c: DMatrix<f64>,
}

/// First row of `(XⁱᵗXⁱ)⁻¹ = [[a, b, vᵗ], [b, …], [v, …]]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InverseFirstBlock {
    pub a: f64,
    pub b: f64,
    pub v: DVector<f64>,
}

struct GroupMoments {
    mean_t: DVector<f64>,
    mean_c: DVector<f64>,
    scatter_t: DMatrix<f64>,
    scatter_c: DMatrix<f64>,
}

fn group_moments(d: &Dataset, z: &DMatrix<f64>) -> GroupMoments {
    let k = z.ncols();
    let (nt, nc) = (d.n_treated() as f64, d.n_control() as f64);
    let mut mean_t = DVector::zeros(k);
    let mut mean_c = DVector::zeros(k);
    for (i, &t) in d.treatment().iter().enumerate() {
        let row = z.row(i).transpose();
        if t {
            mean_t += row;
        } else {
            mean_c += row;
        }
    }
    mean_t /= nt;
    mean_c /= nc;
    let mut scatter_t = DMatrix::zeros(k, k);
    let mut scatter_c = DMatrix::zeros(k, k);
    for (i, &t) in d.treatment().iter().enumerate() {
        if t {
            let dev = z.row(i).transpose() - &mean_t;
            scatter_t.ger(1.0, &dev, &dev, 1.0);
        } else {
            let dev = z.row(i).transpose() - &mean_c;
            scatter_c.ger(1.0, &dev, &dev, 1.0);
        }
    }
    GroupMoments {
        mean_t,
        mean_c,
        scatter_t,
        scatter_c,
    }
}

/// Pooled within-group scatter `Σ_T (z−z̄_T)(z−z̄_T)ᵗ + Σ_C (z−z̄_C)(z−z̄_C)ᵗ`
/// of the selected columns.
pub fn pooled_scatter(d: &Dataset, cols: &[usize]) -> DMatrix<f64> {
    let m = group_moments(d, &d.select(cols));
    m.scatter_t + m.scatter_c
}

fn mean_and_variance(x: &DVector<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Sample Pearson correlation. NaN when either input is constant.
pub fn pearson(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Standardized mean difference `(mean_T − mean_C) / sd` with the overall
/// sample SD. `None` for a constant column or a group with no rows.
pub fn smd(d: &Dataset, column: &DVector<f64>) -> Option<f64> {
    if d.n() < 2 {
        return None;
    }
    let (_, var) = mean_and_variance(column);
    if var <= 0.0 {
        return None;
    }
    let (mut st, mut sc) = (0.0, 0.0);
    for (v, &t) in column.iter().zip(d.treatment()) {
        if t {
            st += v;
        } else {
            sc += v;
        }
    }
    let diff = st / d.n_treated() as f64 - sc / d.n_control() as f64;
    Some(diff / var.sqrt())
}

pub fn balance_summary(d: &Dataset, part: &DesignPartition) -> Result<BalanceSummary> {
    part.validate(d)?;
    let (nt, nc) = (d.n_treated(), d.n_control());
    if nt < 2 || nc < 2 {
        return Err(Error::InsufficientGroup {
            n_treated: nt,
            n_control: nc,
            required: 2,
        });
    }
    let n = d.n() as f64;
    let w = d.w();
    let zi = part.included_matrix(d);
    let zo = part.omitted_matrix(d);

    let column_stats = |z: &DMatrix<f64>, cols: &[usize]| -> Result<(DVector<f64>, DVector<f64>)> {
        let mut mu = DVector::zeros(z.ncols());
        let mut var = DVector::zeros(z.ncols());
        for j in 0..z.ncols() {
            let (m, v) = mean_and_variance(&z.column(j).into_owned());
            if v <= 0.0 {
                return Err(Error::ZeroVariance {
                    column: d.columns()[cols[j]].name.clone(),
                });
            }
            mu[j] = m;
            var[j] = v;
        }
        Ok((mu, var))
    };
    let (mu_i, sigma_i) = column_stats(&zi, &part.included)?;
    let (mu_o, sigma_o) = column_stats(&zo, &part.omitted)?;

    let mi = group_moments(d, &zi);
    let mo = group_moments(d, &zo);
    let u_i = &mi.mean_c - &mi.mean_t;
    let u_o = &mo.mean_c - &mo.mean_t;
    let d_i = -u_i.component_div(&sigma_i.map(f64::sqrt));
    let d_o = -u_o.component_div(&sigma_o.map(f64::sqrt));

    let rho_i = DVector::from_iterator(zi.ncols(), (0..zi.ncols()).map(|j| pearson(&w, &zi.column(j).into_owned())));
    let rho_o = DVector::from_iterator(zo.ncols(), (0..zo.ncols()).map(|j| pearson(&w, &zo.column(j).into_owned())));
    let phi_io = DMatrix::from_fn(zi.ncols(), zo.ncols(), |a, b| {
        pearson(&zi.column(a).into_owned(), &zo.column(b).into_owned())
    });

    let a = &mi.scatter_t + &mi.scatter_c;
    let inv_sd = sigma_i.map(|v| 1.0 / v.sqrt());
    let lambda = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] * inv_sd[r] * inv_sd[c] / (n - 1.0));

    Ok(BalanceSummary {
        n_treated: nt,
        n_control: nc,
        p: zi.transpose() * &w,
        q: zi.row_sum().transpose(),
        cov_t: &mi.scatter_t / (nt as f64 - 1.0),
        cov_c: &mi.scatter_c / (nc as f64 - 1.0),
        u_i,
        u_o,
        d_i,
        d_o,
        rho_i,
        rho_o,
        a,
        lambda,
        sigma_i,
        sigma_o,
        mu_i,
        mu_o,
        phi_io,
    })
}

/// Solver for a symmetric positive-definite matrix after symmetric
/// diagonal equilibration. Rejects matrices whose equilibrated reciprocal
/// condition number is below [`SINGULAR_RCOND`].
#[derive(Debug, Clone)]
pub(crate) struct SpdSolver {
    scale: DVector<f64>,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
}

impl SpdSolver {
    pub(crate) fn new(m: &DMatrix<f64>) -> Result<Self> {
        let k = m.nrows();
        if k == 0 {
            return Ok(Self {
                scale: DVector::zeros(0),
                chol: None,
            });
        }
        let diag = m.diagonal();
        if diag.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::SingularDesign { rcond: 0.0 });
        }
        let scale = diag.map(|v| 1.0 / v.sqrt());
        let eq = DMatrix::from_fn(k, k, |r, c| m[(r, c)] * scale[r] * scale[c]);
        let eig = SymmetricEigen::new(eq.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min().max(0.0);
        let rcond = if max > 0.0 { min / max } else { 0.0 };
        if !(rcond >= SINGULAR_RCOND) {
            return Err(Error::SingularDesign { rcond });
        }
        let chol = Cholesky::new(eq).ok_or(Error::SingularDesign { rcond })?;
        Ok(Self {
            scale,
            chol: Some(chol),
        })
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(0),
            Some(chol) => {
                let scaled = rhs.component_mul(&self.scale);
                chol.solve(&scaled).component_mul(&self.scale)
            }
        }
    }
}

/// Included-block quantities shared by the bias and variance formulas.
#[derive(Debug, Clone)]
pub(crate) struct IncludedBlock {
    pub u: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub solver: SpdSolver,
}

pub(crate) fn included_block(d: &Dataset, part: &DesignPartition) -> Result<IncludedBlock> {
    part.validate(d)?;
    let zi = part.included_matrix(d);
    let m = group_moments(d, &zi);
    let a = &m.scatter_t + &m.scatter_c;
    Ok(IncludedBlock {
        u: &m.mean_c - &m.mean_t,
        p: zi.transpose() * d.w(),
        q: zi.row_sum().transpose(),
        solver: SpdSolver::new(&a)?,
    })
}

/// `a = 1/N_t + 1/N_c + uᵗA⁻¹u`, `b = −1/N_c + (p−q)ᵗA⁻¹u / N_c`, `v = A⁻¹u`.
pub fn inverse_first_block(d: &Dataset, part: &DesignPartition) -> Result<InverseFirstBlock> {
    let block = included_block(d, part)?;
    Ok(first_block_from(d, &block))
}

pub(crate) fn first_block_from(d: &Dataset, block: &IncludedBlock) -> InverseFirstBlock {
    let (nt, nc) = (d.n_treated() as f64, d.n_control() as f64);
    let v = block.solver.solve(&block.u);
    let a = 1.0 / nt + 1.0 / nc + block.u.dot(&v);
    let b = -1.0 / nc + (&block.p - &block.q).dot(&v) / nc;
    InverseFirstBlock { a, b, v }
}

/// Split of a vector into its component inside a column space and the
/// orthogonal remainder.
#[derive(Debug, Clone)]
pub struct Projection {
    pub parallel: DVector<f64>,
    pub orthogonal: DVector<f64>,
    /// Basis columns kept by the rank-revealing factorization.
    pub retained: Vec<usize>,
}

/// Projects `target` onto `span(basis)`. Nearly dependent basis columns are
/// dropped by a pivoted QR with relative tolerance [`PROJECTION_RANK_TOL`].
pub fn project(target: &DVector<f64>, basis: &DMatrix<f64>) -> Result<Projection> {
    if basis.nrows() != target.len() {
        return Err(Error::DimensionMismatch {
            what: "projection basis rows",
            expected: target.len(),
            found: basis.nrows(),
        });
    }
    let qr = pivoted_qr(basis, PROJECTION_RANK_TOL);
    Ok(project_onto(target, &qr))
}

pub(crate) fn project_onto(target: &DVector<f64>, qr: &PivotedQr) -> Projection {
    let q = &qr.q;
    let mut parallel = q * (q.transpose() * target);
    let mut orthogonal = target - &parallel;
    // second pass removes the rounding left by the first
    let correction = q * (q.transpose() * &orthogonal);
    orthogonal -= &correction;
    parallel += correction;
    Projection {
        parallel,
        orthogonal,
        retained: qr.retained_columns(),
    }
}

/// `[1 | Zⁱ]`, the subspace that omitted covariates are orthogonalized against.
pub fn intercept_and_included(d: &Dataset, part: &DesignPartition) -> DMatrix<f64> {
    let mut basis = DMatrix::zeros(d.n(), part.k_included() + 1);
    basis.column_mut(0).fill(1.0);
    for (j, &c) in part.included.iter().enumerate() {
        basis.set_column(j + 1, &d.covariates().column(c));
    }
    basis
}

/// Omitted columns with their `span(1, Zⁱ)` components removed.
#[derive(Debug, Clone)]
pub struct OrthogonalizedOmitted {
    /// `Z⊥ᵒ`, one column per omitted covariate.
    pub residuals: DMatrix<f64>,
    pub original_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
    /// Residual norm below [`ABSORPTION_TOL`] times the original norm.
    pub absorbed: Vec<bool>,
}

pub fn orthogonalize_omitted(d: &Dataset, part: &DesignPartition) -> Result<OrthogonalizedOmitted> {
    part.validate(d)?;
    let qr = pivoted_qr(&intercept_and_included(d, part), PROJECTION_RANK_TOL);
    let k = part.k_omitted();
    let mut residuals = DMatrix::zeros(d.n(), k);
    let mut original_norms = Vec::with_capacity(k);
    let mut residual_norms = Vec::with_capacity(k);
    let mut absorbed = Vec::with_capacity(k);
    for (j, &c) in part.omitted.iter().enumerate() {
        let z = d.column(c);
        let proj = project_onto(&z, &qr);
        let (orig, res) = (z.norm(), proj.orthogonal.norm());
        absorbed.push(res <= ABSORPTION_TOL * orig);
        residuals.set_column(j, &proj.orthogonal);
        original_norms.push(orig);
        residual_norms.push(res);
    }
    Ok(OrthogonalizedOmitted {
        residuals,
        original_norms,
        residual_norms,
        absorbed,
    })
}
