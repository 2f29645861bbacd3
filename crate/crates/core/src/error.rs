use std::path::PathBuf;

use thiserror::Error;

use crate::simloop::SimulationTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bound violated: {0}")]
    Bound(String),

    #[error("basis too large: C({m}+{degree}, {degree}) monomials exceed the cap of {cap}")]
    BasisTooLarge { m: usize, degree: u32, cap: usize },

    #[error("singular least-squares problem: {0}")]
    Singular(String),

    #[error("numeric range error: {0}")]
    NumericRange(String),

    #[error("evaluation budget exceeded: {needed} grid evaluations > budget {budget}; lower grid_points")]
    Budget { needed: u128, budget: u64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("plant diverged at t={t}: {message}")]
    Divergence {
        t: usize,
        message: String,
        partial: Option<Box<SimulationTrace>>,
    },

    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("linear program: {0}")]
    Lp(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
