use thiserror::Error;

/// Failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("invalid estimand: {0}")]
    Estimand(String),
    #[error("{model} did not converge after {iterations} iterations (possible quasi-separation)")]
    NonConvergence { model: String, iterations: usize },
    #[error("singular system in {context}: {detail}")]
    Singular { context: String, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("infeasible sensitivity specification: {0}")]
    Infeasible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Infeasible,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonConvergence { .. } | Error::Singular { .. } | Error::Numerical(_) => {
                ErrorClass::Numerical
            }
            Error::Infeasible(_) => ErrorClass::Infeasible,
            _ => ErrorClass::Validation,
        }
    }

    /// Short machine-readable reason tag.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Estimand(_) => "invalid_estimand",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Singular { .. } => "singular",
            Error::Numerical(_) => "numerical",
            Error::Infeasible(_) => "infeasible",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
