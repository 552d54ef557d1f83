use thiserror::Error;

use crate::spillover::InvertibilityDiagnostic;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed CSV cell. `row` and `column` are 1-based data coordinates
    /// (row 1 is the first unit, column 1 the first period).
    #[error("parse error at unit row {row}, period column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (kkt gap {kkt_gap:.3e})")]
    NoConvergence {
        iterations: usize,
        kkt_gap: f64,
        last_weights: Vec<f64>,
    },

    #[error("fit failed for unit {unit} (units fitted: {succeeded:?}): {source}")]
    UnitFit {
        unit: usize,
        succeeded: Vec<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("Condition IN fails: A'MA condition number {:.3e} exceeds {:.3e}", .0.cond_amwa, .0.threshold)]
    Singular(Box<InvertibilityDiagnostic>),

    #[error("numerically singular matrix: {0}")]
    SingularMatrix(String),

    #[error("post period {period}: {source}")]
    Period {
        period: String,
        #[source]
        source: Box<Error>,
    },

    #[error("experiment cell {cell} failed: {failures} of {reps} replications errored")]
    CellFailed {
        cell: String,
        failures: usize,
        reps: usize,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by a singular spillover system (Condition IN).
    pub fn is_singular(&self) -> bool {
        match self {
            Error::Singular(_) | Error::SingularMatrix(_) => true,
            Error::Period { source, .. } | Error::UnitFit { source, .. } => source.is_singular(),
            _ => false,
        }
    }
}
