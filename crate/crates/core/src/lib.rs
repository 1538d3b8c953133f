//! Closed-form treatment-effect (TE) bias and variance for linear regression
//! adjustment combined with matching.
//!
//! The regression model is `y ~ w + 1 + Zⁱ`, fitted by OLS, while the data
//! are generated by `y = τw + β₀ + Zⁱγⁱ + Zᵒγᵒ + ε`. The omitted block `Zᵒ`
//! is what makes the fit misspecified. Everything in this crate works
//! without the outcome: bias is quantified through the weight vector `g`
//! (the first row of `(XⁱᵗXⁱ)⁻¹Xⁱᵗ`), variance through the top-left element
//! of `(XⁱᵗXⁱ)⁻¹`.
//!
//! Module map:
//!
//! - [`data`]: datasets, CSV ingestion, candidate term generation, outcome
//!   simulation.
//! - [`linalg`]: balance summaries, the first row of the inverse Gram
//!   matrix, pivoted QR projections.
//! - [`error_engine`]: TE bias and variance in standard and normalized form,
//!   plus the replicated-row variance used by matching with replacement.
//! - [`omitted_bias`]: outcome-free normalized bias diagnostics and the three
//!   aggregate estimators.
//! - [`matching`]: propensity model, greedy caliper and Mahalanobis matching.
//! - [`calibration`]: normalized MSE, caliper calibration, Monte-Carlo power
//!   and closed-form verification.
//! - [`synth`]: seeded synthetic datasets shaped like common benchmark
//!   studies.

pub mod calibration;
pub mod data;
pub mod error;
pub mod error_engine;
pub mod linalg;
pub mod matching;
pub mod omitted_bias;
pub(crate) mod ols;
pub mod synth;

pub use error::{Error, Result};

pub use data::{
    ColumnKind, ColumnMeta, Dataset, DesignPartition, Expansion, GenerativeModel, TermKind,
    TermSpec, Warning,
};
pub use error_engine::{ErrorReport, ReplicationMap};
pub use linalg::{BalanceSummary, InverseFirstBlock, Projection};
pub use matching::{Caliper, MatchResult, PropensityModel};
pub use omitted_bias::{BiasMethod, OmittedBiasAnalysis, OmittedBiasReport};
