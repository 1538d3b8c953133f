//! Propensity model, greedy 1:1 matching without replacement, and balance
//! digests.
//!
//! The greedy protocol: treated units are visited in a fixed order (by
//! descending score or descending distance from the control centroid, ties
//! to the lower row index). Each takes the nearest still-unused control
//! (ties to the lower row index) if that distance is within the caliper,
//! otherwise it is dropped. Values closer than [`TIE_RTOL`] (relative)
//! are ties. The caliper check gets the same slack.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{pivoted_qr, pooled_scatter, smd, SpdSolver, PROJECTION_RANK_TOL};

pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
const SEPARATION_COEF_NORM: f64 = 1e6;
const PINNED_PROB: f64 = 1e-10;

/// Logistic regression of the treatment indicator.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityModel {
    /// Intercept first, then one coefficient per term column.
    pub coefficients: DVector<f64>,
    /// Log-odds of treatment for every row.
    pub linear_scores: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `max |Xᵗ(w − p̂)|` at the returned coefficients.
    pub max_score: f64,
}

fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maximum-likelihood fit by iteratively reweighted least squares on an
/// internally standardized design. Stops when the largest score component
/// on the original scale is below [`IRLS_TOL`] or after
/// [`IRLS_MAX_ITER`] iterations.
pub fn fit_propensity(d: &Dataset, term_cols: &[usize]) -> Result<PropensityModel> {
    let n = d.n();
    let k = term_cols.len();
    if n < k + 2 {
        return Err(Error::InvalidArgument(format!("{n} rows cannot support {k} propensity terms")));
    }
    for &c in term_cols {
        if c >= d.n_covariates() {
            return Err(Error::InvalidArgument(format!("propensity term column {c} out of range")));
        }
    }
    let w = d.w();
    let mut x = DMatrix::zeros(n, k + 1);
    x.column_mut(0).fill(1.0);
    let mut xs = x.clone();
    let mut means = vec![0.0; k];
    let mut sds = vec![0.0; k];
    for (j, &c) in term_cols.iter().enumerate() {
        let col = d.column(c);
        let m = col.mean();
        let sd = (col.map(|v| (v - m) * (v - m)).sum() / (n as f64 - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::ZeroVariance {
                column: d.columns()[c].name.clone(),
            });
        }
        means[j] = m;
        sds[j] = sd;
        x.set_column(j + 1, &col);
        xs.set_column(j + 1, &col.map(|v| (v - m) / sd));
    }
    if pivoted_qr(&xs, PROJECTION_RANK_TOL).rank < k + 1 {
        return Err(Error::SingularDesign { rcond: 0.0 });
    }

    let to_original = |beta: &DVector<f64>| -> DVector<f64> {
        let mut out = beta.clone();
        for j in 0..k {
            out[j + 1] = beta[j + 1] / sds[j];
            out[0] -= beta[j + 1] * means[j] / sds[j];
        }
        out
    };
    let loglik = |eta: &DVector<f64>| -> f64 { eta.iter().zip(w.iter()).map(|(e, wi)| wi * e - ln_1p_exp(*e)).sum() };
    let pinned = |p: &DVector<f64>| p.iter().filter(|&&v| v.min(1.0 - v) < PINNED_PROB).count();

    let mut beta = DVector::zeros(k + 1);
    beta[0] = (d.n_treated() as f64 / d.n_control() as f64).ln();
    let mut eta = &xs * &beta;
    let mut converged = false;
    let mut iterations = 0;
    let mut max_score;
    loop {
        let p = eta.map(sigmoid);
        let resid = &w - &p;
        max_score = (x.transpose() * &resid).amax();
        if max_score < IRLS_TOL {
            converged = true;
            break;
        }
        if iterations == IRLS_MAX_ITER {
            break;
        }
        iterations += 1;
        let weights = p.map(|v| v * (1.0 - v));
        let mut h = DMatrix::zeros(k + 1, k + 1);
        for i in 0..n {
            let row = xs.row(i).transpose();
            h.ger(weights[i], &row, &row, 1.0);
        }
        let step = match SpdSolver::new(&h) {
            Ok(s) => s.solve(&(xs.transpose() * &resid)),
            Err(e) => {
                let pins = pinned(&p);
                if pins > 0 {
                    return Err(Error::Separation {
                        coef_norm: to_original(&beta).norm(),
                        pinned: pins,
                    });
                }
                return Err(e);
            }
        };
        let base = loglik(&eta);
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut next_eta = &xs * &next;
        for _ in 0..40 {
            if loglik(&next_eta) >= base - 1e-12 * base.abs() {
                break;
            }
            t *= 0.5;
            next = &beta + &step * t;
            next_eta = &xs * &next;
        }
        beta = next;
        eta = next_eta;
        let norm = to_original(&beta).norm();
        if !(norm <= SEPARATION_COEF_NORM) {
            return Err(Error::Separation {
                coef_norm: norm,
                pinned: pinned(&eta.map(sigmoid)),
            });
        }
    }
    let pins = pinned(&eta.map(sigmoid));
    if pins > 0 {
        return Err(Error::Separation {
            coef_norm: to_original(&beta).norm(),
            pinned: pins,
        });
    }
    Ok(PropensityModel {
        coefficients: to_original(&beta),
        linear_scores: eta,
        converged,
        iterations,
        max_score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaliperScale {
    /// Multiples of the sample SD of the scores.
    Sd,
    /// Score (or distance) units.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Caliper {
    pub width: f64,
    pub scale: CaliperScale,
}

impl Caliper {
    pub fn sd(width: f64) -> Self {
        Self {
            width,
            scale: CaliperScale::Sd,
        }
    }

    pub fn raw(width: f64) -> Self {
        Self {
            width,
            scale: CaliperScale::Raw,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("caliper must be positive, got {}", self.width)))
        }
    }
}

/// SMD of every dataset column on one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceDigest {
    pub n_treated: usize,
    pub n_control: usize,
    pub columns: Vec<String>,
    /// `(mean_T − mean_C)/sd` with the sample's overall SD; `None` when the
    /// column is constant in the sample.
    pub smd: Vec<Option<f64>>,
}

impl BalanceDigest {
    pub fn of(d: &Dataset) -> Self {
        Self {
            n_treated: d.n_treated(),
            n_control: d.n_control(),
            columns: d.columns().iter().map(|c| c.name.clone()).collect(),
            smd: (0..d.n_covariates()).map(|j| smd(d, &d.column(j))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Psm,
    Mahalanobis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub method: MatchMethod,
    /// `(treated_row, control_row)` in the order the pairs were formed.
    pub pairs: Vec<(usize, usize)>,
    /// Sorted union of the pair members.
    pub retained: Vec<usize>,
    pub caliper: Option<Caliper>,
    /// Caliper converted to distance units; `None` when unlimited.
    pub max_distance: Option<f64>,
    pub dropped_treated: Vec<usize>,
    pub replacement: bool,
    pub balance_before: BalanceDigest,
    pub balance_after: BalanceDigest,
}

impl MatchResult {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Keys or distances within this relative gap count as ties, so that
/// rounding differences between equivalent distance formulas cannot change
/// the pairing.
pub const TIE_RTOL: f64 = 1e-10;

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_RTOL * a.abs().max(b.abs())
}

/// Greedy protocol. Treated units are visited by descending `key`, each
/// taking the nearest unused control.
fn greedy(
    d: &Dataset,
    key: impl Fn(usize) -> f64,
    max_distance: Option<f64>,
    dist: impl Fn(usize, usize) -> f64,
) -> (Vec<(usize, usize)>, Vec<usize>) {
    let controls = d.control_rows();
    let mut remaining = d.treated_rows();
    let keys: Vec<f64> = remaining.iter().map(|&t| key(t)).collect();
    let mut remaining_keys = keys;
    let mut used = vec![false; controls.len()];
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    while !remaining.is_empty() {
        let top = remaining_keys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rows are ascending, so the first tied entry has the lowest index
        let pos = remaining_keys.iter().position(|&k| k == top || tied(k, top)).expect("nonempty");
        let t = remaining.remove(pos);
        remaining_keys.remove(pos);

        let dists: Vec<Option<f64>> = controls
            .iter()
            .enumerate()
            .map(|(ci, &c)| (!used[ci]).then(|| dist(t, c)))
            .collect();
        let nearest = dists.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let choice = dists
            .iter()
            .position(|dc| dc.is_some_and(|dc| dc == nearest || tied(dc, nearest)));
        match choice {
            Some(ci) if max_distance.is_none_or(|m| nearest <= m || tied(nearest, m)) => {
                used[ci] = true;
                pairs.push((t, controls[ci]));
            }
            _ => dropped.push(t),
        }
    }
    (pairs, dropped)
}

fn finish(
    d: &Dataset,
    method: MatchMethod,
    caliper: Option<Caliper>,
    max_distance: Option<f64>,
    pairs: Vec<(usize, usize)>,
    dropped_treated: Vec<usize>,
) -> Result<MatchResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyMatch);
    }
    let mut retained: Vec<usize> = pairs.iter().flat_map(|&(t, c)| [t, c]).collect();
    retained.sort_unstable();
    let after = d.subset(&retained)?;
    Ok(MatchResult {
        method,
        pairs,
        retained,
        caliper,
        max_distance,
        dropped_treated,
        replacement: false,
        balance_before: BalanceDigest::of(d),
        balance_after: BalanceDigest::of(&after),
    })
}

fn sample_sd(x: &DVector<f64>) -> f64 {
    let m = x.mean();
    (x.map(|v| (v - m) * (v - m)).sum() / (x.len() as f64 - 1.0)).sqrt()
}

/// Greedy nearest-neighbour matching on a scalar score (typically the
/// linear propensity score). `None` means no caliper.
pub fn match_caliper(scores: &DVector<f64>, d: &Dataset, caliper: Option<Caliper>) -> Result<MatchResult> {
    if scores.len() != d.n() {
        return Err(Error::DimensionMismatch {
            what: "scores",
            expected: d.n(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let max_distance = match caliper {
        None => None,
        Some(c) => {
            c.validate()?;
            Some(match c.scale {
                CaliperScale::Sd => c.width * sample_sd(scores),
                CaliperScale::Raw => c.width,
            })
        }
    };
    let (pairs, dropped) = greedy(d, |i| scores[i], max_distance, |t, c| (scores[t] - scores[c]).abs());
    finish(d, MatchMethod::Psm, caliper, max_distance, pairs, dropped)
}

/// Greedy matching on Mahalanobis distance with `S` the pooled
/// within-group covariance of `cols`. The caliper is always in distance
/// units.
pub fn match_mahalanobis(d: &Dataset, cols: &[usize], caliper: Option<Caliper>) -> Result<MatchResult> {
    if cols.is_empty() || cols.iter().any(|&c| c >= d.n_covariates()) {
        return Err(Error::InvalidArgument("Mahalanobis matching needs valid columns".into()));
    }
    if d.n() < cols.len() + 3 {
        return Err(Error::InvalidArgument("too few rows for the pooled covariance".into()));
    }
    if let Some(c) = caliper {
        c.validate()?;
    }
    let s = pooled_scatter(d, cols) / (d.n() as f64 - 2.0);
    let solver = SpdSolver::new(&s)?;
    let z = d.select(cols);
    let row = |i: usize| z.row(i).transpose();
    let dist_to = |x: &DVector<f64>| x.dot(&solver.solve(x)).max(0.0).sqrt();

    let controls = d.control_rows();
    let centroid = controls.iter().map(|&c| row(c)).fold(DVector::zeros(cols.len()), |a, b| a + b)
        / controls.len() as f64;
    let max_distance = caliper.map(|c| c.width);
    let (pairs, dropped) = greedy(d, |i| dist_to(&(row(i) - &centroid)), max_distance, |t, c| dist_to(&(row(t) - row(c))));
    finish(d, MatchMethod::Mahalanobis, caliper, max_distance, pairs, dropped)
}

/// Row subset keeping column metadata. Fails if a group becomes empty.
pub fn subset(d: &Dataset, retained: &[usize]) -> Result<Dataset> {
    d.subset(retained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{duplicated_pairs, random_dataset};

    fn dataset(treat: &[bool], cols: &[&[f64]]) -> Dataset {
        let n = treat.len();
        let z = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let names: Vec<String> = (0..cols.len()).map(|j| format!("z{j}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        Dataset::from_columns("w", treat.to_vec(), &names, z).unwrap()
    }

    #[test]
    fn intercept_only_fit() {
        let d = random_dataset(40, 1, 3);
        let m = fit_propensity(&d, &[]).unwrap();
        let expect = (d.n_treated() as f64 / d.n_control() as f64).ln();
        assert!((m.coefficients[0] - expect).abs() < 1e-12);
        assert!(m.linear_scores.iter().all(|&s| (s - expect).abs() < 1e-12));
        assert!(m.converged);
    }

    #[test]
    fn separation_detected() {
        let d = dataset(&[true, true, true, false, false, false], &[&[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]]);
        assert!(matches!(fit_propensity(&d, &[0]), Err(Error::Separation { .. })));
    }

    #[test]
    fn score_equations_hold() {
        for seed in 0..10 {
            let d = random_dataset(80, 3, 20 + seed);
            let m = fit_propensity(&d, &[0, 1, 2]).unwrap();
            assert!(m.converged);
            let x = {
                let mut x = DMatrix::from_element(d.n(), 4, 1.0);
                for j in 0..3 {
                    x.set_column(j + 1, &d.column(j));
                }
                x
            };
            let eta = &x * &m.coefficients;
            assert!((&eta - &m.linear_scores).amax() < 1e-9);
            let p = eta.map(sigmoid);
            assert!((x.transpose() * (d.w() - p)).amax() < 1e-8);
        }
    }

    #[test]
    fn collinear_terms_rejected() {
        let z0 = [1.0, 2.0, 0.0, 4.0, 3.0, 5.0];
        let z1: Vec<f64> = z0.iter().map(|v| 3.0 * v + 1.0).collect();
        let d = dataset(&[true, false, true, false, true, false], &[&z0, &z1]);
        assert!(matches!(fit_propensity(&d, &[0, 1]), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn no_caliper_matches_every_treated() {
        let d = random_dataset(30, 2, 8);
        let scores = d.column(0);
        let m = match_caliper(&scores, &d, None).unwrap();
        assert!(d.n_treated() <= d.n_control());
        assert_eq!(m.n_pairs(), d.n_treated());
        assert!(m.dropped_treated.is_empty());
    }

    #[test]
    fn far_treated_is_dropped() {
        let t = [true, true, false, false, false];
        let d = dataset(&t, &[&[0.0; 5]]);
        let scores = DVector::from_column_slice(&[10.0, 0.1, 0.0, 0.2, 0.3]);
        let m = match_caliper(&scores, &d, Some(Caliper::raw(1.0))).unwrap();
        assert_eq!(m.dropped_treated, vec![0]);
        assert_eq!(m.pairs, vec![(1, 2)]);
        assert!(matches!(
            match_caliper(&DVector::from_column_slice(&[10.0, 9.0, 0.0, 0.2, 0.3]), &d, Some(Caliper::raw(1.0))),
            Err(Error::EmptyMatch)
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = [true, false, false];
        let d = dataset(&t, &[&[0.0, 1.0, 2.0]]);
        let scores = DVector::from_column_slice(&[1.0, 0.0, 2.0]);
        let m = match_caliper(&scores, &d, None).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
    }

    #[test]
    fn mahalanobis_on_duplicates_matches_exactly() {
        let d = duplicated_pairs(6, 3, 2);
        let m = match_mahalanobis(&d, &[0, 1, 2], Some(Caliper::raw(1e-9))).unwrap();
        assert_eq!(m.n_pairs(), 6);
        for &(t, c) in &m.pairs {
            assert_eq!(d.covariates().row(t), d.covariates().row(c));
        }
    }

    #[test]
    fn singular_mahalanobis_covariance() {
        let z0 = [1.0, 2.0, 0.0, 4.0, 3.0, 5.0];
        let z1: Vec<f64> = z0.iter().map(|v| 3.0 * v + 1.0).collect();
        let d = dataset(&[true, false, true, false, true, false], &[&z0, &z1]);
        assert!(matches!(match_mahalanobis(&d, &[0, 1], None), Err(Error::SingularDesign { .. })));
    }

    #[test]
    fn balance_after_matches_subset() {
        let d = random_dataset(50, 3, 12);
        let m = match_caliper(&d.column(0), &d, Some(Caliper::sd(0.3))).unwrap();
        let sub = subset(&d, &m.retained).unwrap();
        assert_eq!(BalanceDigest::of(&sub), m.balance_after);
        assert_eq!(sub.n_treated(), m.n_pairs());
        let one = subset(&d, &[m.pairs[0].0, m.pairs[0].1]).unwrap();
        assert_eq!((one.n_treated(), one.n_control()), (1, 1));
        assert_eq!(subset(&d, &(0..d.n()).collect::<Vec<_>>()).unwrap(), d);
    }
}
