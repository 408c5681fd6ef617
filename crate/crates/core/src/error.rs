use thiserror::Error;

use crate::relevance::RankReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    /// The relevance (rank) condition fails; the report carries the singular values.
    #[error("not identified: {reason}")]
    NotIdentified {
        reason: String,
        report: Option<Box<RankReport>>,
    },

    #[error("rank deficiency at u = {u}: {reason} (Assumption 1 relevance condition fails)")]
    RankDeficient { u: f64, reason: String },

    #[error("Newton iteration failed to converge at u = {u} (last residual {residual:.3e})")]
    NoConvergence { u: f64, residual: f64 },

    /// A testable identifying assumption is rejected by the data.
    #[error("testable assumption failed: {0}")]
    AssumptionFailed(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::InvalidModel(msg.into())
    }

    pub(crate) fn not_identified(reason: impl Into<String>, report: Option<RankReport>) -> Self {
        Error::NotIdentified {
            reason: reason.into(),
            report: report.map(Box::new),
        }
    }

    /// Identification failures are scientific findings rather than malfunctions.
    pub fn is_identification_failure(&self) -> bool {
        matches!(
            self,
            Error::NotIdentified { .. } | Error::RankDeficient { .. } | Error::AssumptionFailed(_)
        )
    }
}
