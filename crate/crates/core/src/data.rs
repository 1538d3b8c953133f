//! Datasets, design partitions, candidate omitted terms and the generative
//! model used by the Monte-Carlo oracles.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum TermKind {
    Interaction { left: usize, right: usize },
    Square { column: usize },
}

/// A generated candidate term. Column indices refer to the dataset the
/// term was generated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSpec {
    pub kind: TermKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    /// `Some` for columns produced by [`expand_terms`].
    pub term: Option<TermSpec>,
}

/// Structured diagnostic record. The CLI prints these as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub code: String,
    pub subject: String,
    pub message: String,
}

/// Treatment indicator plus an `N×K` adjustment covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    treatment_name: String,
    treatment: Vec<bool>,
    covariates: DMatrix<f64>,
    columns: Vec<ColumnMeta>,
    n_treated: usize,
}

impl Dataset {
    pub fn new(
        treatment_name: impl Into<String>,
        treatment: Vec<bool>,
        covariates: DMatrix<f64>,
        columns: Vec<ColumnMeta>,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if covariates.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "covariate rows",
                expected: n,
                found: covariates.nrows(),
            });
        }
        if covariates.ncols() != columns.len() {
            return Err(Error::DimensionMismatch {
                what: "column metadata",
                expected: covariates.ncols(),
                found: columns.len(),
            });
        }
        if let Some(bad) = covariates.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite covariate value {bad}")));
        }
        for (j, meta) in columns.iter().enumerate() {
            if meta.kind == ColumnKind::Binary
                && covariates.column(j).iter().any(|&v| v != 0.0 && v != 1.0)
            {
                return Err(Error::InvalidDataset(format!(
                    "binary column `{}` contains values other than 0/1",
                    meta.name
                )));
            }
        }
        let n_treated = treatment.iter().filter(|&&t| t).count();
        if n_treated == 0 || n_treated == n {
            return Err(Error::InsufficientGroup {
                n_treated,
                n_control: n - n_treated,
                required: 1,
            });
        }
        Ok(Self {
            treatment_name: treatment_name.into(),
            treatment,
            covariates,
            columns,
            n_treated,
        })
    }

    /// Builds a dataset inferring each column's kind from its values.
    pub fn from_columns(
        treatment_name: impl Into<String>,
        treatment: Vec<bool>,
        names: &[&str],
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        let columns = names
            .iter()
            .enumerate()
            .map(|(j, name)| ColumnMeta {
                name: name.to_string(),
                kind: infer_kind(covariates.column(j).iter().copied()),
                term: None,
            })
            .collect();
        Self::new(treatment_name, treatment, covariates, columns)
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    /// Treatment indicator as a 0/1 vector.
    pub fn w(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.treatment.iter().map(|&t| f64::from(u8::from(t))))
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.covariates.column(j).into_owned()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Columns `cols` stacked side by side (`N×cols.len()`).
    pub fn select(&self, cols: &[usize]) -> DMatrix<f64> {
        self.covariates.select_columns(cols)
    }

    /// Row subset in the order given. Column metadata is preserved.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = HashSet::with_capacity(rows.len());
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidArgument(format!("row index {r} out of range (N = {n})")));
            }
            if !seen.insert(r) {
                return Err(Error::InvalidArgument(format!("row index {r} repeated")));
            }
        }
        let treatment: Vec<bool> = rows.iter().map(|&r| self.treatment[r]).collect();
        let covariates = self.covariates.select_rows(rows);
        Self::new(self.treatment_name.clone(), treatment, covariates, self.columns.clone())
    }

    /// Indices of treated rows, ascending.
    pub fn treated_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatment[i]).collect()
    }

    /// Indices of control rows, ascending.
    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.treatment[i]).collect()
    }

    /// Appends columns. Kinds are inferred.
    fn with_appended(&self, extra: Vec<(ColumnMeta, DVector<f64>)>) -> Result<Self> {
        let k = self.n_covariates();
        let mut covariates = self.covariates.clone().resize_horizontally(k + extra.len(), 0.0);
        let mut columns = self.columns.clone();
        for (i, (meta, values)) in extra.into_iter().enumerate() {
            covariates.set_column(k + i, &values);
            columns.push(meta);
        }
        Self::new(self.treatment_name.clone(), self.treatment.clone(), covariates, columns)
    }

    /// Writes the dataset (treatment column first) as RFC-4180 CSV.
    /// `extra` columns, e.g. a simulated outcome, are appended on the right.
    pub fn write_csv(&self, path: &Path, extra: &[(&str, &DVector<f64>)]) -> Result<()> {
        if let Some((_, values)) = extra.iter().find(|(_, v)| v.len() != self.n()) {
            return Err(Error::DimensionMismatch {
                what: "extra column length",
                expected: self.n(),
                found: values.len(),
            });
        }
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut writer = csv::Writer::from_writer(file);
        let mut header = vec![self.treatment_name.clone()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        header.extend(extra.iter().map(|(name, _)| name.to_string()));
        writer.write_record(&header)?;
        for i in 0..self.n() {
            let mut record = vec![(u8::from(self.treatment[i])).to_string()];
            record.extend(self.covariates.row(i).iter().map(|v| v.to_string()));
            record.extend(extra.iter().map(|(_, values)| values[i].to_string()));
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }
}

/// Binary iff every observed value is 0 or 1.
pub fn infer_kind(values: impl IntoIterator<Item = f64>) -> ColumnKind {
    if values.into_iter().all(|v| v == 0.0 || v == 1.0) {
        ColumnKind::Binary
    } else {
        ColumnKind::Numeric
    }
}

/// Reads a header-first CSV file. Row order is preserved.
pub fn load_csv(path: &Path, treatment_col: &str, covariate_cols: &[&str]) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let locate = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let treatment_pos = locate(treatment_col)?;
    let covariate_pos = covariate_cols
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>>>()?;

    let mut treatment = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |pos: usize, column: &str| -> Result<f64> {
            let raw = record.get(pos).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    row: row + 1,
                    column: column.to_string(),
                    value: raw.to_string(),
                })
        };
        let t = parse(treatment_pos, treatment_col)?;
        if t != 0.0 && t != 1.0 {
            return Err(Error::NonBinaryTreatment { row: row + 1, value: t });
        }
        treatment.push(t == 1.0);
        for (&pos, &name) in covariate_pos.iter().zip(covariate_cols) {
            values.push(parse(pos, name)?);
        }
    }
    if treatment.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let covariates = DMatrix::from_row_slice(treatment.len(), covariate_cols.len(), &values);
    Dataset::from_columns(treatment_col, treatment, covariate_cols, covariates)
}

/// Output of [`expand_terms`].
#[derive(Debug, Clone)]
pub struct Expansion {
    pub dataset: Dataset,
    /// Candidate terms that were kept, in the order their columns were appended.
    pub terms: Vec<TermSpec>,
    /// Column indices of the appended terms within `dataset`.
    pub term_columns: Vec<usize>,
    pub warnings: Vec<Warning>,
}

/// Appends pairwise interactions and/or squares of every original column.
///
/// Interactions come first, in `(i, j)` order with `i < j`, then squares in
/// column order. Squares of binary columns duplicate the column and are
/// never generated. Constant generated columns are dropped with a warning.
pub fn expand_terms(d: &Dataset, include_squares: bool, include_interactions: bool) -> Result<Expansion> {
    let names: HashSet<&str> = d.columns().iter().map(|c| c.name.as_str()).collect();
    for meta in d.columns() {
        let looks_generated = meta
            .name
            .split_once(':')
            .map(|(a, b)| names.contains(a) && names.contains(b))
            .unwrap_or(false)
            || meta
                .name
                .strip_suffix("^2")
                .map(|base| names.contains(base))
                .unwrap_or(false);
        if meta.term.is_some() || looks_generated {
            return Err(Error::AlreadyExpanded(meta.name.clone()));
        }
    }

    let k = d.n_covariates();
    let mut candidates = Vec::new();
    if include_interactions {
        for left in 0..k {
            for right in left + 1..k {
                let label = format!("{}:{}", d.columns()[left].name, d.columns()[right].name);
                let values = d.covariates().column(left).component_mul(&d.covariates().column(right));
                candidates.push((TermSpec { kind: TermKind::Interaction { left, right }, label }, values));
            }
        }
    }
    if include_squares {
        for column in 0..k {
            if d.columns()[column].kind == ColumnKind::Binary {
                continue;
            }
            let label = format!("{}^2", d.columns()[column].name);
            let values = d.covariates().column(column).map(|v| v * v);
            candidates.push((TermSpec { kind: TermKind::Square { column }, label }, values));
        }
    }

    let mut warnings = Vec::new();
    let mut terms = Vec::new();
    let mut extra = Vec::new();
    for (term, values) in candidates {
        let first = values[0];
        if values.iter().all(|&v| v == first) {
            warnings.push(Warning {
                code: "zero-variance-term".into(),
                subject: term.label.clone(),
                message: format!("generated term `{}` is constant ({first}) and was dropped", term.label),
            });
            continue;
        }
        let meta = ColumnMeta {
            name: term.label.clone(),
            kind: infer_kind(values.iter().copied()),
            term: Some(term.clone()),
        };
        terms.push(term);
        extra.push((meta, values));
    }
    let term_columns = (k..k + terms.len()).collect();
    Ok(Expansion {
        dataset: d.with_appended(extra)?,
        terms,
        term_columns,
        warnings,
    })
}

/// Split of covariate columns into the included block `Zⁱ` and the
/// candidate-omitted block `Zᵒ`. The regression design is `Xⁱ = [w | 1 | Zⁱ]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignPartition {
    pub included: Vec<usize>,
    pub omitted: Vec<usize>,
}

impl DesignPartition {
    pub fn new(included: Vec<usize>, omitted: Vec<usize>) -> Self {
        Self { included, omitted }
    }

    /// Checks indices against `d`: in range, no repeats, disjoint blocks.
    pub fn validate(&self, d: &Dataset) -> Result<()> {
        let k = d.n_covariates();
        let mut seen = HashSet::new();
        for &c in self.included.iter().chain(&self.omitted) {
            if c >= k {
                return Err(Error::InvalidArgument(format!("covariate index {c} out of range (K = {k})")));
            }
            if !seen.insert(c) {
                return Err(Error::InvalidArgument(format!(
                    "covariate index {c} appears twice in the partition"
                )));
            }
        }
        Ok(())
    }

    pub fn k_included(&self) -> usize {
        self.included.len()
    }

    pub fn k_omitted(&self) -> usize {
        self.omitted.len()
    }

    pub fn included_matrix(&self, d: &Dataset) -> DMatrix<f64> {
        d.select(&self.included)
    }

    pub fn omitted_matrix(&self, d: &Dataset) -> DMatrix<f64> {
        d.select(&self.omitted)
    }

    /// `Xⁱ = [w | 1 | Zⁱ]`.
    pub fn design_matrix(&self, d: &Dataset) -> DMatrix<f64> {
        let n = d.n();
        let mut x = DMatrix::zeros(n, self.k_included() + 2);
        x.set_column(0, &d.w());
        x.column_mut(1).fill(1.0);
        for (j, &c) in self.included.iter().enumerate() {
            x.set_column(j + 2, &d.covariates().column(c));
        }
        x
    }
}

/// Coefficients of the data-generating linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub tau: f64,
    pub intercept: f64,
    pub gamma_included: Vec<f64>,
    pub gamma_omitted: Vec<f64>,
    pub noise_sd: f64,
}

impl GenerativeModel {
    pub fn validate(&self, part: &DesignPartition) -> Result<()> {
        if self.gamma_included.len() != part.k_included() {
            return Err(Error::DimensionMismatch {
                what: "gamma_included",
                expected: part.k_included(),
                found: self.gamma_included.len(),
            });
        }
        if self.gamma_omitted.len() != part.k_omitted() {
            return Err(Error::DimensionMismatch {
                what: "gamma_omitted",
                expected: part.k_omitted(),
                found: self.gamma_omitted.len(),
            });
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        Ok(())
    }

    /// `E[y] = τw + β₀ + Zⁱγⁱ + Zᵒγᵒ`.
    pub fn mean_outcome(&self, d: &Dataset, part: &DesignPartition) -> Result<DVector<f64>> {
        part.validate(d)?;
        self.validate(part)?;
        let mut mean = d.w() * self.tau;
        mean.add_scalar_mut(self.intercept);
        mean += part.included_matrix(d) * DVector::from_column_slice(&self.gamma_included);
        mean += part.omitted_matrix(d) * DVector::from_column_slice(&self.gamma_omitted);
        Ok(mean)
    }
}

/// Draws `y = E[y] + ε` with `ε ~ N(0, σ₀²)` i.i.d. from a ChaCha8 stream
/// seeded by `seed`.
pub fn simulate_outcome(
    d: &Dataset,
    part: &DesignPartition,
    gm: &GenerativeModel,
    seed: u64,
) -> Result<DVector<f64>> {
    let mut y = gm.mean_outcome(d, part)?;
    if gm.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += gm.noise_sd * z;
        }
    }
    Ok(y)
}
