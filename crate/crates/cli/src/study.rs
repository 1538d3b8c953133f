//! Turns a configuration into a dataset, a design partition and, when
//! asked, a matched subsample.

use matchcal::data::{expand_terms, load_csv};
use matchcal::matching::{fit_propensity, match_caliper, match_mahalanobis, MatchResult};
use matchcal::synth;
use matchcal::{Dataset, DesignPartition, Warning};
use nalgebra::DVector;

use crate::config::{Method, RunConfig, SyntheticKind};
use crate::error::CliError;
use crate::report::emit_warnings;

pub struct Study {
    /// Columns as loaded, before candidate terms are generated.
    pub raw: Dataset,
    /// `raw` plus generated terms. `part` indexes into this.
    pub expanded: Dataset,
    pub part: DesignPartition,
    /// Columns of the propensity or Mahalanobis model.
    pub match_columns: Vec<usize>,
    pub warnings: Vec<Warning>,
}

fn load_raw(cfg: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(path) = &cfg.input {
        let names: Vec<String> = if cfg.covariates.is_empty() {
            let mut reader = csv::Reader::from_path(path).map_err(matchcal::Error::from)?;
            let header = reader.headers().map_err(matchcal::Error::from)?;
            header.iter().filter(|h| *h != cfg.treatment).map(str::to_string).collect()
        } else {
            cfg.covariates.clone()
        };
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        return Ok(load_csv(path, &cfg.treatment, &names)?);
    }
    let s = cfg.synthetic.clone().unwrap_or_default();
    let d = match s.kind {
        SyntheticKind::LalondeLike => synth::lalonde_like(s.seed),
        SyntheticKind::LindnerLike => synth::lindner_like(s.seed),
        SyntheticKind::Confounded => synth::confounded(s.n, s.k, s.seed),
        SyntheticKind::Random => synth::random_dataset(s.n, s.k, s.seed),
    };
    if cfg.covariates.is_empty() {
        return Ok(d);
    }
    let cols = indices(&d, &cfg.covariates)?;
    let meta = cols.iter().map(|&c| d.columns()[c].clone()).collect();
    Ok(Dataset::new(d.treatment_name(), d.treatment().to_vec(), d.select(&cols), meta)?)
}

fn indices(d: &Dataset, names: &[String]) -> Result<Vec<usize>, CliError> {
    names.iter().map(|n| d.column_index(n).map_err(CliError::from)).collect()
}

impl Study {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let raw = load_raw(cfg)?;
        let (expanded, generated, warnings) = if cfg.omitted.squares || cfg.omitted.interactions {
            let e = expand_terms(&raw, cfg.omitted.squares, cfg.omitted.interactions)?;
            (e.dataset, e.term_columns, e.warnings)
        } else {
            (raw.clone(), Vec::new(), Vec::new())
        };
        let included = match &cfg.included {
            Some(names) => indices(&expanded, names)?,
            None => (0..raw.n_covariates()).collect(),
        };
        let omitted = match &cfg.omitted.terms {
            Some(names) => indices(&expanded, names)?,
            None => generated,
        };
        let part = DesignPartition::new(included, omitted);
        part.validate(&expanded)?;
        let match_columns = match &cfg.propensity {
            Some(names) => indices(&expanded, names)?,
            None => part.included.clone(),
        };
        emit_warnings(&warnings);
        Ok(Self {
            raw,
            expanded,
            part,
            match_columns,
            warnings,
        })
    }

    /// Linear propensity scores on `match_columns`.
    pub fn scores(&self) -> Result<DVector<f64>, CliError> {
        Ok(fit_propensity(&self.expanded, &self.match_columns)?.linear_scores)
    }

    /// Matching with the single configured caliper; `None` for method `none`.
    pub fn matched(&self, cfg: &RunConfig) -> Result<Option<MatchResult>, CliError> {
        let caliper = cfg.caliper.map(|w| cfg.caliper_of(w));
        Ok(match cfg.match_method {
            Method::None => None,
            Method::Psm => Some(match_caliper(&self.scores()?, &self.expanded, caliper)?),
            Method::Mahalanobis => Some(match_mahalanobis(&self.expanded, &self.match_columns, caliper)?),
        })
    }

    pub fn require_psm(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
        if cfg.match_method == Method::Psm {
            Ok(())
        } else {
            Err(CliError::config(format!("`{command}` sweeps propensity-score calipers and needs match_method \"psm\"")))
        }
    }
}
