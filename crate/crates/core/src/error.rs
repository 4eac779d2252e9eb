use thiserror::Error;

#[derive(Debug, Error)]
pub enum LamnError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parameter {theta:?} outside the parameter box")]
    OutOfBox { theta: Vec<f64> },
    #[error("finite-difference step for parameter {index} leaves the parameter box")]
    StepLeavesBox { index: usize },
    #[error("{what} is singular (min singular value {min_sv:e})")]
    Singular { what: String, min_sv: f64 },
    #[error("{what} is ill-conditioned (condition number {cond:e})")]
    IllConditioned { what: String, cond: f64 },
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("the model carries no information about the parameter: {0}")]
    NoInformation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("failure budget exceeded: {failed} of {total} replications failed")]
    FailureBudget { failed: usize, total: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LamnError>;
