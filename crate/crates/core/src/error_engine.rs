//! Closed-form TE bias and variance of the OLS coefficient on `w`.
//!
//! With `g` the first row of `(XⁱᵗXⁱ)⁻¹Xⁱᵗ`, the estimator is `τ̂ = gᵗy`, so
//! `E[τ̂] − τ = gᵗZᵒγᵒ` and `Var[τ̂] = σ₀²‖g‖² = σ₀²·[(XⁱᵗXⁱ)⁻¹]₁₁`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Dataset, DesignPartition};
use crate::error::{Error, Result};
use crate::linalg::{balance_summary, first_block_from, included_block, orthogonalize_omitted, SpdSolver};

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    /// `δ = gᵗZᵒγᵒ`
    pub bias: f64,
    pub variance: f64,
    /// `σ₀²(1/N_t + 1/N_c)`
    pub variance_min: f64,
    /// `σ²/σ₀²`
    pub normalized_variance: f64,
    /// `√N·δ/‖Z⊥ᵒγᵒ‖`; `None` when the orthogonalized omitted signal is zero.
    pub normalized_bias: Option<f64>,
    pub g: DVector<f64>,
    pub sigma0_sq: f64,
}

/// Source row of each observation in a dataset built by sampling with
/// replacement. Rows sharing an origin carry the same noise draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplicationMap {
    origin: Vec<usize>,
}

impl ReplicationMap {
    /// Validates that rows with equal origin are identical in treatment and
    /// every covariate.
    pub fn new(d: &Dataset, origin: Vec<usize>) -> Result<Self> {
        if origin.len() != d.n() {
            return Err(Error::InvalidReplicationMap(format!(
                "expected {} origin ids, found {}",
                d.n(),
                origin.len()
            )));
        }
        let mut first: HashMap<usize, usize> = HashMap::new();
        for (row, &o) in origin.iter().enumerate() {
            match first.get(&o) {
                None => {
                    first.insert(o, row);
                }
                Some(&r0) => {
                    let same = d.treatment()[r0] == d.treatment()[row]
                        && d.covariates().row(r0).iter().zip(d.covariates().row(row).iter())
                            .all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Err(Error::InvalidReplicationMap(format!(
                            "rows {r0} and {row} share origin {o} but differ"
                        )));
                    }
                }
            }
        }
        Ok(Self { origin })
    }

    /// Every row its own origin.
    pub fn identity(n: usize) -> Self {
        Self {
            origin: (0..n).collect(),
        }
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// `Ψ`: `Ψ[m,n] = 1` when rows `m` and `n` share an origin.
    pub fn psi(&self) -> DMatrix<f64> {
        let n = self.origin.len();
        DMatrix::from_fn(n, n, |i, j| if self.origin[i] == self.origin[j] { 1.0 } else { 0.0 })
    }
}

fn check_sigma0_sq(sigma0_sq: f64) -> Result<()> {
    if sigma0_sq > 0.0 && sigma0_sq.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma0_sq must be positive, got {sigma0_sq}")))
    }
}

/// `g = a·w + b·1 + ZⁱA⁻¹uⁱ`.
pub fn g_vector(d: &Dataset, part: &DesignPartition) -> Result<DVector<f64>> {
    let block = included_block(d, part)?;
    let first = first_block_from(d, &block);
    let mut g = part.included_matrix(d) * &first.v;
    for (gi, &t) in g.iter_mut().zip(d.treatment()) {
        *gi += first.b + if t { first.a } else { 0.0 };
    }
    Ok(g)
}

fn gamma_vector(part: &DesignPartition, gamma_o: &[f64]) -> Result<DVector<f64>> {
    if gamma_o.len() != part.k_omitted() {
        return Err(Error::DimensionMismatch {
            what: "gamma_omitted",
            expected: part.k_omitted(),
            found: gamma_o.len(),
        });
    }
    Ok(DVector::from_column_slice(gamma_o))
}

/// `δ = gᵗZᵒγᵒ`.
pub fn te_bias(d: &Dataset, part: &DesignPartition, gamma_o: &[f64]) -> Result<f64> {
    let gamma = gamma_vector(part, gamma_o)?;
    let g = g_vector(d, part)?;
    Ok(g.dot(&(part.omitted_matrix(d) * gamma)))
}

/// `σ² = σ₀²(1/N_t + 1/N_c + uⁱᵗA⁻¹uⁱ)`.
pub fn te_variance(d: &Dataset, part: &DesignPartition, sigma0_sq: f64) -> Result<f64> {
    check_sigma0_sq(sigma0_sq)?;
    let block = included_block(d, part)?;
    Ok(sigma0_sq * first_block_from(d, &block).a)
}

/// `√(N(N−1)/(N_tN_c))`, the constant turning correlations back into the
/// standard-form bias. The inverse of the factor linking `ρ` and `d`.
pub fn normalized_bias_prefactor(n_treated: usize, n_control: usize) -> f64 {
    let (nt, nc) = (n_treated as f64, n_control as f64);
    let n = nt + nc;
    (n * (n - 1.0) / (nt * nc)).sqrt()
}

/// Bias from correlations:
/// `c·{ρᵒᵗ + ρⁱᵗΛ⁻¹(ρⁱρᵒᵗ − Φ^{io})}·Σᵒ^{1/2}γᵒ` with
/// `c` = [`normalized_bias_prefactor`].
pub fn te_bias_normalized(d: &Dataset, part: &DesignPartition, gamma_o: &[f64]) -> Result<f64> {
    let gamma = gamma_vector(part, gamma_o)?;
    if part.k_omitted() == 0 {
        return Ok(0.0);
    }
    let s = balance_summary(d, part)?;
    let mut row = s.rho_o.transpose();
    if part.k_included() > 0 {
        let lam = SpdSolver::new(&s.lambda)?;
        let x = lam.solve(&s.rho_i);
        let m = &s.rho_i * s.rho_o.transpose() - &s.phi_io;
        row += x.transpose() * m;
    }
    let scaled = gamma.component_mul(&s.sigma_o.map(f64::sqrt));
    Ok(normalized_bias_prefactor(s.n_treated, s.n_control) * row.dot(&scaled.transpose()))
}

/// `σ₀²(1/N_t + 1/N_c)(1 + ρⁱᵗΛ⁻¹ρⁱ)`.
pub fn te_variance_normalized(d: &Dataset, part: &DesignPartition, sigma0_sq: f64) -> Result<f64> {
    check_sigma0_sq(sigma0_sq)?;
    let base = 1.0 / d.n_treated() as f64 + 1.0 / d.n_control() as f64;
    if part.k_included() == 0 {
        part.validate(d)?;
        return Ok(sigma0_sq * base);
    }
    let s = balance_summary(d, part)?;
    let lam = SpdSolver::new(&s.lambda)?;
    let quad = s.rho_i.dot(&lam.solve(&s.rho_i));
    Ok(sigma0_sq * base * (1.0 + quad))
}

/// Top-left element of `σ₀²·DΨDᵗ` with `D = (XⁱᵗXⁱ)⁻¹Xⁱᵗ`: rows that are
/// copies of one original share their noise, so their `g` weights add
/// before squaring.
pub fn te_variance_with_replacement(
    d: &Dataset,
    part: &DesignPartition,
    rep: &ReplicationMap,
    sigma0_sq: f64,
) -> Result<f64> {
    check_sigma0_sq(sigma0_sq)?;
    if rep.origin.len() != d.n() {
        return Err(Error::InvalidReplicationMap(format!(
            "expected {} origin ids, found {}",
            d.n(),
            rep.origin.len()
        )));
    }
    let g = g_vector(d, part)?;
    let mut sums: HashMap<usize, f64> = HashMap::new();
    let mut order = Vec::new();
    for (&o, &gi) in rep.origin.iter().zip(g.iter()) {
        let e = sums.entry(o).or_insert_with(|| {
            order.push(o);
            0.0
        });
        *e += gi;
    }
    // fixed summation order: first appearance of each origin
    Ok(sigma0_sq * order.iter().map(|o| sums[o] * sums[o]).sum::<f64>())
}

/// Shortcut valid when included covariates are balanced (`uⁱ = 0`):
/// `σ₀²(1/N_t + 1/N_c) + σ₀²/N_t²·#dup_T + σ₀²/N_c²·#dup_C`, counting ordered
/// pairs of distinct rows sharing an origin within each group.
pub fn te_variance_with_replacement_balanced(d: &Dataset, rep: &ReplicationMap, sigma0_sq: f64) -> Result<f64> {
    check_sigma0_sq(sigma0_sq)?;
    let (nt, nc) = (d.n_treated() as f64, d.n_control() as f64);
    let mut counts: HashMap<(bool, usize), usize> = HashMap::new();
    for (&o, &t) in rep.origin.iter().zip(d.treatment()) {
        *counts.entry((t, o)).or_default() += 1;
    }
    let (mut dup_t, mut dup_c) = (0usize, 0usize);
    for (&(t, _), &c) in &counts {
        let pairs = c * (c - 1);
        if t {
            dup_t += pairs;
        } else {
            dup_c += pairs;
        }
    }
    Ok(sigma0_sq * (1.0 / nt + 1.0 / nc + dup_t as f64 / (nt * nt) + dup_c as f64 / (nc * nc)))
}

pub fn error_report(
    d: &Dataset,
    part: &DesignPartition,
    gamma_o: &[f64],
    sigma0_sq: f64,
) -> Result<ErrorReport> {
    check_sigma0_sq(sigma0_sq)?;
    let gamma = gamma_vector(part, gamma_o)?;
    let g = g_vector(d, part)?;
    let bias = g.dot(&(part.omitted_matrix(d) * &gamma));
    let a = g.norm_squared();
    let signal = if part.k_omitted() > 0 {
        (orthogonalize_omitted(d, part)?.residuals * &gamma).norm()
    } else {
        0.0
    };
    let normalized_bias = (signal > 0.0).then(|| (d.n() as f64).sqrt() * bias / signal);
    Ok(ErrorReport {
        bias,
        variance: sigma0_sq * a,
        variance_min: sigma0_sq * (1.0 / d.n_treated() as f64 + 1.0 / d.n_control() as f64),
        normalized_variance: a,
        normalized_bias,
        g,
        sigma0_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{duplicated_pairs, random_dataset};
    use approx::assert_relative_eq;

    fn dataset(treat: &[bool], cols: &[&[f64]]) -> Dataset {
        let n = treat.len();
        let z = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let names: Vec<String> = (0..cols.len()).map(|j| format!("z{j}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        Dataset::from_columns("w", treat.to_vec(), &names, z).unwrap()
    }

    /// First element of `(XᵗX)⁻¹Xᵗ·target` by a dense solve.
    fn ols_first(d: &Dataset, part: &DesignPartition, target: &DVector<f64>) -> f64 {
        let x = part.design_matrix(d);
        let xtx = x.transpose() * &x;
        xtx.lu().solve(&(x.transpose() * target)).unwrap()[0]
    }

    #[test]
    fn g_without_covariates_is_difference_in_means() {
        let d = dataset(&[true, false, true, false, false], &[&[0.3, 1.0, 2.0, -1.0, 0.0]]);
        let g = g_vector(&d, &DesignPartition::new(vec![], vec![0])).unwrap();
        for (gi, &t) in g.iter().zip(d.treatment()) {
            let expect = if t { 0.5 } else { -1.0 / 3.0 };
            assert_relative_eq!(*gi, expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn g_matches_dense_solve() {
        for seed in 0..30 {
            let d = random_dataset(15, 3, seed);
            let part = DesignPartition::new(vec![0, 1], vec![2]);
            let g = g_vector(&d, &part).unwrap();
            let z = d.column(2);
            assert!((g.dot(&z) - ols_first(&d, &part, &z)).abs() < 1e-10);
            // weights annihilate the intercept and included columns, and sum to one on w
            assert!(g.sum().abs() < 1e-12);
            assert!((g.dot(&d.w()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_zero_cases() {
        let d = random_dataset(15, 3, 7);
        assert_eq!(te_bias(&d, &DesignPartition::new(vec![0, 1, 2], vec![]), &[]).unwrap(), 0.0);
        assert_eq!(te_bias(&d, &DesignPartition::new(vec![0], vec![1, 2]), &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            te_bias(&d, &DesignPartition::new(vec![0], vec![1, 2]), &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicated_pairs_have_no_bias() {
        for seed in 0..20 {
            let d = duplicated_pairs(8, 4, seed);
            let part = DesignPartition::new(vec![0, 1], vec![2, 3]);
            assert!(te_bias(&d, &part, &[3.0, -7.5]).unwrap().abs() < 1e-10);
            assert_relative_eq!(te_variance(&d, &part, 1.0).unwrap(), 2.0 / 8.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn balanced_variance_example() {
        let t = [true, true, true, true, true, false, false, false, false, false];
        let z = [1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let d = dataset(&t, &[&z]);
        let v = te_variance(&d, &DesignPartition::new(vec![0], vec![]), 1.0).unwrap();
        assert_relative_eq!(v, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn variance_matches_dense_inverse() {
        for seed in 0..30 {
            let d = random_dataset(18, 3, 50 + seed);
            let part = DesignPartition::new(vec![0, 1, 2], vec![]);
            let x = part.design_matrix(&d);
            let inv = (x.transpose() * &x).try_inverse().unwrap();
            let v = te_variance(&d, &part, 2.5).unwrap();
            assert!((v - 2.5 * inv[(0, 0)]).abs() <= 1e-10 * v);
            assert!(v >= 2.5 * (1.0 / d.n_treated() as f64 + 1.0 / d.n_control() as f64));
        }
    }

    #[test]
    fn normalized_forms_match_standard() {
        for seed in 0..30 {
            let d = random_dataset(25, 5, 900 + seed);
            let part = DesignPartition::new(vec![0, 1, 2], vec![3, 4]);
            let gamma = [1.3, -0.4];
            let b = te_bias(&d, &part, &gamma).unwrap();
            let bn = te_bias_normalized(&d, &part, &gamma).unwrap();
            assert!((b - bn).abs() <= 1e-8 * b.abs().max(1e-300), "seed {seed}: {b} vs {bn}");
            let v = te_variance(&d, &part, 0.7).unwrap();
            let vn = te_variance_normalized(&d, &part, 0.7).unwrap();
            assert!((v - vn).abs() <= 1e-8 * v);
        }
    }

    #[test]
    fn normalized_variance_is_scale_invariant() {
        let d = random_dataset(20, 3, 4);
        let part = DesignPartition::new(vec![0, 1, 2], vec![]);
        let scales = [3.0, 0.01, 250.0];
        let z = DMatrix::from_fn(d.n(), 3, |i, j| d.covariates()[(i, j)] * scales[j] + 10.0);
        let scaled = Dataset::new("w", d.treatment().to_vec(), z, d.columns().to_vec()).unwrap();
        let v0 = te_variance_normalized(&d, &part, 1.0).unwrap();
        let v1 = te_variance_normalized(&scaled, &part, 1.0).unwrap();
        assert!((v0 - v1).abs() < 1e-10);
    }

    #[test]
    fn replacement_without_duplicates_is_lower_bound() {
        let t = [true, true, false, false];
        let d = dataset(&t, &[&[1.0, 2.0, 2.0, 1.0]]);
        let part = DesignPartition::new(vec![0], vec![]);
        let v = te_variance_with_replacement(&d, &part, &ReplicationMap::identity(4), 1.0).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn replacement_duplicate_pair_example() {
        // both treated rows are copies of one original; controls are distinct
        let t = [true, true, false, false];
        let d = dataset(&t, &[&[0.0, 0.0, 0.0, 0.0]]);
        let part = DesignPartition::new(vec![], vec![]);
        let rep = ReplicationMap::new(&d, vec![0, 0, 1, 2]).unwrap();
        let general = te_variance_with_replacement(&d, &part, &rep, 1.0).unwrap();
        let shortcut = te_variance_with_replacement_balanced(&d, &rep, 1.0).unwrap();
        assert_relative_eq!(general, 1.5, epsilon = 1e-15);
        assert_relative_eq!(shortcut, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn replication_map_rejects_mismatched_rows() {
        let d = dataset(&[true, true, false, false], &[&[1.0, 2.0, 3.0, 4.0]]);
        assert!(matches!(
            ReplicationMap::new(&d, vec![0, 0, 1, 2]),
            Err(Error::InvalidReplicationMap(_))
        ));
        assert!(ReplicationMap::new(&d, vec![0, 1]).is_err());
    }

    #[test]
    fn report_fields_consistent() {
        let d = random_dataset(30, 4, 11);
        let part = DesignPartition::new(vec![0, 1], vec![2, 3]);
        let r = error_report(&d, &part, &[0.5, 2.0], 1.7).unwrap();
        assert_relative_eq!(r.bias, te_bias(&d, &part, &[0.5, 2.0]).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(r.variance, te_variance(&d, &part, 1.7).unwrap(), max_relative = 1e-12);
        assert!(r.variance >= r.variance_min - 1e-12);
        assert!(r.normalized_bias.unwrap().abs() <= (d.n() as f64).sqrt() * r.g.norm() + 1e-9);
    }
}
