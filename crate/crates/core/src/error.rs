use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} in column `{column}` (data row {row})")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("treatment value {value} at row {row} is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: f64 },

    #[error("dataset has no rows")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("column `{column}` has zero variance")]
    ZeroVariance { column: String },

    #[error("need at least {required} treated and {required} control rows, found {n_treated} and {n_control}")]
    InsufficientGroup {
        n_treated: usize,
        n_control: usize,
        required: usize,
    },

    #[error("singular design (reciprocal condition estimate {rcond:e}); remove collinear or redundant columns")]
    SingularDesign { rcond: f64 },

    #[error("dataset already contains generated terms ({0}); re-expansion is not allowed")]
    AlreadyExpanded(String),

    #[error("logistic fit separates the groups (coefficient norm {coef_norm:.3e}, {pinned} fitted probabilities pinned at 0/1)")]
    Separation { coef_norm: f64, pinned: usize },

    #[error("no treated unit could be matched")]
    EmptyMatch,

    #[error("invalid replication map: {0}")]
    InvalidReplicationMap(String),

    #[error("term `{0}` lies in the span of the intercept and included covariates")]
    Absorbed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no feasible configuration: {0}")]
    Infeasible(String),
}

impl Error {
    /// Stable machine-readable identifier, used for CLI error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::MissingColumn(_) => "missing-column",
            Error::NonNumeric { .. } => "non-numeric",
            Error::NonBinaryTreatment { .. } => "non-binary-treatment",
            Error::EmptyDataset => "empty-dataset",
            Error::InvalidDataset(_) => "invalid-dataset",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ZeroVariance { .. } => "zero-variance",
            Error::InsufficientGroup { .. } => "insufficient-group",
            Error::SingularDesign { .. } => "singular-design",
            Error::AlreadyExpanded(_) => "already-expanded",
            Error::Separation { .. } => "separation",
            Error::EmptyMatch => "empty-match",
            Error::InvalidReplicationMap(_) => "invalid-replication-map",
            Error::Absorbed(_) => "absorbed-term",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Infeasible(_) => "infeasible",
        }
    }
}
