use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{path}: file is empty")]
    EmptyCsv { path: PathBuf },

    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedCsv {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: row {row}, column {column}: cannot parse {cell:?} as a number")]
    NonNumericCsv {
        path: PathBuf,
        row: usize,
        column: usize,
        cell: String,
    },

    #[error("iterate diverged at step {step} (norm {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("refused: {0}")]
    Refused(String),

    #[error("optimizer did not converge; best grid point nu = {best_nu}, kappa = {best_kappa}")]
    NoConvergence { best_nu: f64, best_kappa: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
