//! Declarative run configuration. Every field has a default, and the
//! resolved configuration is copied into each report's metadata.

use std::fs;
use std::path::{Path, PathBuf};

use matchcal::matching::{Caliper, CaliperScale};
use matchcal::BiasMethod;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Psm,
    Mahalanobis,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    LalondeLike,
    LindnerLike,
    Confounded,
    Random,
}

/// Generated input, used when no CSV is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synthetic {
    pub kind: SyntheticKind,
    /// Row count, ignored by the benchmark-shaped kinds.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Covariate count, ignored by the benchmark-shaped kinds.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    400
}

fn default_k() -> usize {
    4
}

impl Default for Synthetic {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Confounded,
            n: default_n(),
            k: default_k(),
            seed: 0,
        }
    }
}

/// Candidate omitted terms. Squares and pairwise interactions of the
/// covariates are generated according to the flags; `terms`, when given,
/// picks a subset of the generated and original columns by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmittedSpec {
    pub squares: bool,
    pub interactions: bool,
    pub terms: Option<Vec<String>>,
}

impl Default for OmittedSpec {
    fn default() -> Self {
        Self {
            squares: true,
            interactions: true,
            terms: None,
        }
    }
}

/// A coefficient vector, or one value repeated for every term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficients {
    Scalar(f64),
    List(Vec<f64>),
}

impl Coefficients {
    pub fn resolve(&self, k: usize, what: &str) -> Result<Vec<f64>, CliError> {
        match self {
            Coefficients::Scalar(v) => Ok(vec![*v; k]),
            Coefficients::List(v) if v.len() == k => Ok(v.clone()),
            Coefficients::List(v) => Err(CliError::config(format!("{what} has {} values but there are {k} terms", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub synthetic: Option<Synthetic>,
    pub treatment: String,
    /// Covariate columns to load; empty means every non-treatment column.
    pub covariates: Vec<String>,
    /// Adjustment columns; `None` means every loaded covariate.
    pub included: Option<Vec<String>>,
    pub omitted: OmittedSpec,
    /// Columns of the propensity (or Mahalanobis) model; `None` means `included`.
    pub propensity: Option<Vec<String>>,
    pub match_method: Method,
    /// Caliper for `diagnose` and `match`; `null` matches without one.
    pub caliper: Option<f64>,
    /// Caliper grid for `calibrate` and `power`.
    pub calipers: Vec<f64>,
    pub caliper_scale: CaliperScale,
    /// Add the no-caliper (and, for calibration, no-matching) settings to the grid.
    pub baselines: bool,
    pub r_o_grid: Vec<f64>,
    pub bias_method: BiasMethod,
    pub sigma0: f64,
    pub seed: Option<u64>,
    pub iterations: usize,
    pub tau: f64,
    pub intercept: f64,
    pub gamma_included: Coefficients,
    pub gamma_omitted: Coefficients,
    pub effect_size: f64,
    pub alpha: f64,
    /// Name of the simulated outcome column.
    pub outcome: String,
    pub out: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            synthetic: None,
            treatment: "treat".into(),
            covariates: Vec::new(),
            included: None,
            omitted: OmittedSpec::default(),
            propensity: None,
            match_method: Method::Psm,
            caliper: Some(0.2),
            calipers: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            caliper_scale: CaliperScale::Sd,
            baselines: true,
            r_o_grid: vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0],
            bias_method: BiasMethod::Subspace,
            sigma0: 1.0,
            seed: None,
            iterations: 1000,
            tau: 0.0,
            intercept: 0.0,
            gamma_included: Coefficients::Scalar(0.0),
            gamma_omitted: Coefficients::Scalar(0.0),
            effect_size: 0.3,
            alpha: 0.05,
            outcome: "y".into(),
            out: PathBuf::from("."),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Fills the implicit synthetic input and checks the grids. Column
    /// names are checked when the data is loaded.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        match (&self.input, &self.synthetic) {
            (Some(_), Some(_)) => return Err(CliError::config("give either `input` or `synthetic`, not both")),
            (None, None) => self.synthetic = Some(Synthetic::default()),
            _ => {}
        }
        if self.calipers.is_empty() {
            return Err(CliError::config("`calipers` must be nonempty"));
        }
        if self.r_o_grid.is_empty() {
            return Err(CliError::config("`r_o_grid` must be nonempty"));
        }
        if let Some(c) = self.caliper.iter().chain(&self.calipers).find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(CliError::config(format!("calipers must be positive and finite, got {c}")));
        }
        if self.threads == Some(0) {
            return Err(CliError::config("`threads` must be at least 1"));
        }
        Ok(self)
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::config("this command runs a simulation and needs `seed` (or --seed)"))
    }

    /// Caliper in the configured units. Mahalanobis calipers are always
    /// in distance units.
    pub fn caliper_of(&self, width: f64) -> Caliper {
        match (self.match_method, self.caliper_scale) {
            (Method::Mahalanobis, _) | (_, CaliperScale::Raw) => Caliper::raw(width),
            _ => Caliper::sd(width),
        }
    }
}
