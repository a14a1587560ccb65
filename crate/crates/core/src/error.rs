use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scenario not found: {0}")]
    ScenarioNotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("integration failed: step budget of {max_steps} exhausted at t = {t}")]
    StepLimit { max_steps: usize, t: f64 },

    #[error("integration failed: non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("covariance is not positive semidefinite after repair ({0})")]
    IndefiniteCovariance(String),

    #[error("numerical breakdown: {0}")]
    Numerical(String),

    #[error("QP failure at SCP iteration {iteration}: {status}")]
    Subproblem { iteration: usize, status: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ScenarioNotFound(_) => "scenario_not_found",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
            Error::Validation(_) => "validation",
            Error::Dimension(_) => "dimension",
            Error::StepLimit { .. } => "step_limit",
            Error::NonFinite { .. } => "non_finite",
            Error::IndefiniteCovariance(_) => "indefinite_covariance",
            Error::Numerical(_) => "numerical",
            Error::Subproblem { .. } => "subproblem",
        }
    }
}
