//! Outcome-free bias diagnostics for candidate omitted terms.
//!
//! All quantities live on a *reference frame*: the full (pre-matching)
//! dataset. Omitted columns are orthogonalized against `span(1, Zⁱ)` and
//! unit-normalized there, and a matched subsample is represented by its
//! weight vector `g` embedded back into reference rows (zeros elsewhere).
//! The omitted signal `Z⊥ᵒγᵒ` is therefore *not* re-normalized after
//! matching, so normalized biases of different subsamples are on one scale.
//!
//! For a subsample with weights `g̃` (embedded):
//!
//! - per term: `δⁿ_k = √N·g̃ᵗẑ_k` with `ẑ_k = z⊥_k/‖z⊥_k‖`,
//! - subspace: `√N·‖P g̃‖`, `P` the projector on `span(Z⊥ᵒ)`,
//! - absolute: `√N·g̃ᵗĝ` with `ĝ` the unit pre-matching weight direction.
//!   Since `g̃ᵗg = ‖g‖²` for every subsample this is `√N‖g‖` regardless of
//!   the matching, which is the invariance of absolute maximization.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Dataset, DesignPartition};
use crate::error::{Error, Result};
use crate::error_engine::{g_vector, te_bias};
use crate::linalg::{orthogonalize_omitted, pivoted_qr, project_onto, smd, PivotedQr, PROJECTION_RANK_TOL};
use crate::matching::MatchResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMethod {
    /// Largest single-term `|δⁿ_k|`.
    Single,
    /// Maximum over directions in the span of the orthogonalized terms.
    Subspace,
    /// Maximum over every direction orthogonal to `span(1, Zⁱ)`.
    Absolute,
    /// Mean of `|δⁿ_k|` over non-absorbed terms. Not an upper bound.
    MeanSingle,
}

#[derive(Debug, Clone, Serialize)]
pub struct TermBias {
    pub label: String,
    /// Dataset column of the term.
    pub column: usize,
    pub absorbed: bool,
    /// Signed `δⁿ_k`; `None` when absorbed.
    pub normalized_bias: Option<f64>,
    pub squared_normalized_bias: Option<f64>,
    pub smd_before: Option<f64>,
    pub smd_after: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateBias {
    pub single_max: f64,
    pub subspace_max: f64,
    pub absolute_max: f64,
    pub mean_single: f64,
    /// Every omitted term is absorbed, so `single_max = subspace_max = 0`.
    pub all_absorbed: bool,
}

impl AggregateBias {
    pub fn get(&self, method: BiasMethod) -> f64 {
        match method {
            BiasMethod::Single => self.single_max,
            BiasMethod::Subspace => self.subspace_max,
            BiasMethod::Absolute => self.absolute_max,
            BiasMethod::MeanSingle => self.mean_single,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OmittedBiasReport {
    pub n_reference: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub per_term: Vec<TermBias>,
    pub aggregate: AggregateBias,
    pub absorbed_terms: Vec<String>,
}

/// Precomputed reference-frame quantities for one dataset and partition.
#[derive(Debug, Clone)]
pub struct OmittedBiasAnalysis {
    reference: Dataset,
    part: DesignPartition,
    unit_terms: DMatrix<f64>,
    absorbed: Vec<bool>,
    span: PivotedQr,
    eligible: Vec<usize>,
    g_direction: DVector<f64>,
    g_norm: f64,
}

impl OmittedBiasAnalysis {
    pub fn new(d: &Dataset, part: &DesignPartition) -> Result<Self> {
        let orth = orthogonalize_omitted(d, part)?;
        let g = g_vector(d, part)?;
        let n = d.n();
        let k = part.k_omitted();
        let mut unit_terms = DMatrix::zeros(n, k);
        for j in 0..k {
            if !orth.absorbed[j] {
                unit_terms.set_column(j, &(orth.residuals.column(j) / orth.residual_norms[j]));
            }
        }
        let eligible: Vec<usize> = (0..k).filter(|&j| !orth.absorbed[j]).collect();
        let basis = DMatrix::from_fn(n, eligible.len(), |i, j| unit_terms[(i, eligible[j])]);
        let g_norm = g.norm();
        Ok(Self {
            reference: d.clone(),
            part: part.clone(),
            span: pivoted_qr(&basis, PROJECTION_RANK_TOL),
            unit_terms,
            absorbed: orth.absorbed,
            eligible,
            g_direction: g / g_norm,
            g_norm,
        })
    }

    pub fn reference(&self) -> &Dataset {
        &self.reference
    }

    pub fn partition(&self) -> &DesignPartition {
        &self.part
    }

    pub fn absorbed(&self) -> &[bool] {
        &self.absorbed
    }

    pub fn labels(&self) -> Vec<String> {
        self.part
            .omitted
            .iter()
            .map(|&c| self.reference.columns()[c].name.clone())
            .collect()
    }

    /// `‖g‖` of the reference sample, i.e. `√(σ²/σ₀²)`.
    pub fn reference_g_norm(&self) -> f64 {
        self.g_norm
    }

    /// Weight vector of the subsample `retained` embedded in reference rows.
    pub fn embedded_g(&self, retained: &[usize]) -> Result<DVector<f64>> {
        let sub = self.reference.subset(retained)?;
        let g_sub = g_vector(&sub, &self.part)?;
        let mut g = DVector::zeros(self.reference.n());
        for (&row, &v) in retained.iter().zip(g_sub.iter()) {
            g[row] = v;
        }
        Ok(g)
    }

    fn all_rows(&self) -> Vec<usize> {
        (0..self.reference.n()).collect()
    }

    /// Signed `δⁿ_k` per omitted term (`None` for absorbed terms).
    pub fn term_biases(&self, retained: Option<&[usize]>) -> Result<Vec<Option<f64>>> {
        let g = self.weights(retained)?;
        Ok(self.term_biases_from(&g))
    }

    fn weights(&self, retained: Option<&[usize]>) -> Result<DVector<f64>> {
        match retained {
            Some(r) => self.embedded_g(r),
            None => self.embedded_g(&self.all_rows()),
        }
    }

    fn sqrt_n(&self) -> f64 {
        (self.reference.n() as f64).sqrt()
    }

    fn term_biases_from(&self, g: &DVector<f64>) -> Vec<Option<f64>> {
        (0..self.absorbed.len())
            .map(|j| (!self.absorbed[j]).then(|| self.sqrt_n() * g.dot(&self.unit_terms.column(j))))
            .collect()
    }

    fn aggregate_from(&self, g: &DVector<f64>) -> AggregateBias {
        let terms: Vec<f64> = self.term_biases_from(g).into_iter().flatten().map(f64::abs).collect();
        let single_max = terms.iter().copied().fold(0.0, f64::max);
        let mean_single = if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        };
        let subspace_max = if self.span.rank == 0 {
            0.0
        } else {
            self.sqrt_n() * project_onto(g, &self.span).parallel.norm()
        };
        AggregateBias {
            single_max,
            subspace_max,
            absolute_max: self.sqrt_n() * g.dot(&self.g_direction),
            mean_single,
            all_absorbed: self.eligible.is_empty(),
        }
    }

    pub fn aggregate(&self, retained: Option<&[usize]>) -> Result<AggregateBias> {
        Ok(self.aggregate_from(&self.weights(retained)?))
    }

    /// Coefficients `γᵒ` (one per omitted term, zero for absorbed terms)
    /// whose orthogonalized signal points along the subspace maximizer.
    pub fn subspace_direction(&self, retained: Option<&[usize]>) -> Result<DVector<f64>> {
        let g = self.weights(retained)?;
        let mut gamma = DVector::zeros(self.absorbed.len());
        if self.span.rank == 0 {
            return Ok(gamma);
        }
        let target = project_onto(&g, &self.span).parallel;
        let coef = self.span.solve_least_squares(&target);
        // coefficients are for unit-normalized residuals; rescale to raw columns
        let orth = orthogonalize_omitted(&self.reference, &self.part)?;
        for (pos, &j) in self.eligible.iter().enumerate() {
            gamma[j] = coef[pos] / orth.residual_norms[j];
        }
        Ok(gamma)
    }

    pub fn report(&self, retained: Option<&[usize]>) -> Result<OmittedBiasReport> {
        let g = self.weights(retained)?;
        let sub = match retained {
            Some(r) => self.reference.subset(r)?,
            None => self.reference.clone(),
        };
        let biases = self.term_biases_from(&g);
        let labels = self.labels();
        let per_term = self
            .part
            .omitted
            .iter()
            .enumerate()
            .map(|(j, &c)| TermBias {
                label: labels[j].clone(),
                column: c,
                absorbed: self.absorbed[j],
                normalized_bias: biases[j],
                squared_normalized_bias: biases[j].map(|b| b * b),
                smd_before: smd(&self.reference, &self.reference.column(c)),
                smd_after: smd(&sub, &sub.column(c)),
            })
            .collect();
        let absorbed_terms = labels
            .iter()
            .zip(&self.absorbed)
            .filter(|(_, &a)| a)
            .map(|(l, _)| l.clone())
            .collect();
        Ok(OmittedBiasReport {
            n_reference: self.reference.n(),
            n_treated: sub.n_treated(),
            n_control: sub.n_control(),
            per_term,
            aggregate: self.aggregate_from(&g),
            absorbed_terms,
        })
    }
}

/// Signed `δⁿ_k` of omitted term `term_index` (a position in
/// `part.omitted`) on the unmatched data.
pub fn single_term_normalized_bias(d: &Dataset, part: &DesignPartition, term_index: usize) -> Result<f64> {
    let analysis = OmittedBiasAnalysis::new(d, part)?;
    check_term(part, term_index)?;
    analysis.term_biases(None)?[term_index].ok_or_else(|| Error::Absorbed(analysis.labels()[term_index].clone()))
}

pub fn aggregate_bias(d: &Dataset, part: &DesignPartition, method: BiasMethod) -> Result<f64> {
    Ok(OmittedBiasAnalysis::new(d, part)?.aggregate(None)?.get(method))
}

fn check_term(part: &DesignPartition, term_index: usize) -> Result<()> {
    if term_index >= part.k_omitted() {
        return Err(Error::InvalidArgument(format!(
            "term index {term_index} out of range ({} omitted terms)",
            part.k_omitted()
        )));
    }
    Ok(())
}

/// `((gᵗz)² − (g′ᵗz′)²)/(gᵗz)²` for one omitted term, before vs after
/// matching. Independent of the term's coefficient.
pub fn relative_squared_bias_reduction(
    d: &Dataset,
    part: &DesignPartition,
    term_index: usize,
    matched: &MatchResult,
) -> Result<f64> {
    relative_squared_bias_reduction_rows(d, part, term_index, &matched.retained)
}

/// [`relative_squared_bias_reduction`] for an arbitrary row subset.
pub fn relative_squared_bias_reduction_rows(
    d: &Dataset,
    part: &DesignPartition,
    term_index: usize,
    retained: &[usize],
) -> Result<f64> {
    check_term(part, term_index)?;
    let label = d.columns()[part.omitted[term_index]].name.clone();
    let sub = d.subset(retained)?;
    for sample in [d, &sub] {
        if orthogonalize_omitted(sample, part)?.absorbed[term_index] {
            return Err(Error::Absorbed(label));
        }
    }
    let mut unit = vec![0.0; part.k_omitted()];
    unit[term_index] = 1.0;
    let before = te_bias(d, part, &unit)?;
    let after = te_bias(&sub, part, &unit)?;
    if before == 0.0 {
        return Err(Error::Absorbed(label));
    }
    Ok((before * before - after * after) / (before * before))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{duplicated_pairs, random_dataset};

    #[test]
    fn in_span_term_is_absorbed() {
        let d = random_dataset(20, 3, 1);
        // append a copy of column 0 as an omitted term
        let mut z = d.covariates().clone().insert_column(3, 0.0);
        let c0 = z.column(0).into_owned();
        z.set_column(3, &(c0 * 2.0));
        let mut cols = d.columns().to_vec();
        cols.push(crate::data::ColumnMeta {
            name: "copy".into(),
            kind: crate::data::ColumnKind::Numeric,
            term: None,
        });
        let d = Dataset::new("w", d.treatment().to_vec(), z, cols).unwrap();
        let part = DesignPartition::new(vec![0, 1], vec![3, 2]);
        assert!(matches!(single_term_normalized_bias(&d, &part, 0), Err(Error::Absorbed(_))));
        let a = OmittedBiasAnalysis::new(&d, &part).unwrap();
        assert_eq!(a.absorbed(), &[true, false]);
        let r = a.report(None).unwrap();
        assert_eq!(r.absorbed_terms, vec!["copy".to_string()]);
    }

    #[test]
    fn perfectly_matched_terms_have_zero_bias() {
        let d = duplicated_pairs(10, 4, 3);
        let part = DesignPartition::new(vec![0, 1], vec![2, 3]);
        for k in 0..2 {
            assert!(single_term_normalized_bias(&d, &part, k).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn term_bias_bounded_by_g_norm() {
        for seed in 0..20 {
            let d = random_dataset(30, 5, 40 + seed);
            let part = DesignPartition::new(vec![0, 1], vec![2, 3, 4]);
            let a = OmittedBiasAnalysis::new(&d, &part).unwrap();
            let bound = (d.n() as f64).sqrt() * a.reference_g_norm();
            for b in a.term_biases(None).unwrap().into_iter().flatten() {
                assert!(b.abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn term_parallel_to_g_attains_bound() {
        let d = random_dataset(25, 2, 9);
        let part = DesignPartition::new(vec![0], vec![]);
        let g = g_vector(&d, &part).unwrap();
        let z = d.covariates().clone().insert_column(2, 0.0);
        let mut z = z;
        z.set_column(2, &g);
        let mut cols = d.columns().to_vec();
        cols.push(crate::data::ColumnMeta {
            name: "g".into(),
            kind: crate::data::ColumnKind::Numeric,
            term: None,
        });
        let d2 = Dataset::new("w", d.treatment().to_vec(), z, cols).unwrap();
        let part2 = DesignPartition::new(vec![0], vec![2]);
        let b = single_term_normalized_bias(&d2, &part2, 0).unwrap();
        let bound = (d.n() as f64).sqrt() * g.norm();
        assert!((b - bound).abs() <= 1e-10 * bound);
    }

    #[test]
    fn single_equals_subspace_for_one_term() {
        let d = random_dataset(30, 3, 77);
        let part = DesignPartition::new(vec![0, 1], vec![2]);
        let s = aggregate_bias(&d, &part, BiasMethod::Single).unwrap();
        let p = aggregate_bias(&d, &part, BiasMethod::Subspace).unwrap();
        assert!((s - p).abs() <= 1e-12 * p.max(1e-300));
    }

    #[test]
    fn absolute_matches_variance_identity() {
        let d = random_dataset(30, 4, 78);
        let part = DesignPartition::new(vec![0, 1], vec![2, 3]);
        let abs = aggregate_bias(&d, &part, BiasMethod::Absolute).unwrap();
        let v = crate::error_engine::te_variance(&d, &part, 1.0).unwrap();
        assert!((abs - (d.n() as f64 * v).sqrt()).abs() <= 1e-10 * abs);
    }

    #[test]
    fn subspace_direction_reproduces_maximum() {
        let d = random_dataset(40, 5, 79);
        let part = DesignPartition::new(vec![0, 1], vec![2, 3, 4]);
        let a = OmittedBiasAnalysis::new(&d, &part).unwrap();
        let gamma = a.subspace_direction(None).unwrap();
        let bias = te_bias(&d, &part, gamma.as_slice()).unwrap();
        let orth = orthogonalize_omitted(&d, &part).unwrap();
        let signal = (orth.residuals * &gamma).norm();
        let value = (d.n() as f64).sqrt() * bias / signal;
        let sub = a.aggregate(None).unwrap().subspace_max;
        assert!((value - sub).abs() <= 1e-10 * sub);
    }

    #[test]
    fn all_absorbed_flag() {
        let d = random_dataset(20, 2, 5);
        let part = DesignPartition::new(vec![0, 1], vec![]);
        let agg = OmittedBiasAnalysis::new(&d, &part).unwrap().aggregate(None).unwrap();
        assert!(agg.all_absorbed);
        assert_eq!(agg.single_max, 0.0);
        assert_eq!(agg.subspace_max, 0.0);
        assert!(agg.absolute_max > 0.0);
    }
}
