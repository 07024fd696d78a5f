use std::path::PathBuf;

use crate::packing::PackingReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration has overlapping particles")]
    Overlapping,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("packing failed: {}", .0.failure.as_deref().unwrap_or("unknown reason"))]
    PackingFailed(Box<PackingReport>),

    #[error("solver produced a non-finite value after {iterations} iterations")]
    SolverDiverged { iterations: usize },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
