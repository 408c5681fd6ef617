use std::fmt;

use qiv_core::Error;
use serde::Serialize;

/// Error reported as JSON on stderr; the process exits with `exit_code`.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip)]
    pub exit_code: u8,
}

impl Failure {
    /// Unknown command, malformed or inconsistent configuration.
    pub fn schema(message: impl Into<String>) -> Self {
        Failure {
            kind: "schema",
            message: message.into(),
            exit_code: 2,
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            kind: "io",
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidModel(_) => "invalid_model",
            Error::NotIdentified { .. }
            | Error::RankDeficient { .. }
            | Error::AssumptionFailed(_) => "not_identified",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Singular(_) => "singular",
            Error::Csv(_) | Error::Json(_) => "format",
            Error::Io(_) => "io",
        };
        Failure {
            kind,
            message: e.to_string(),
            exit_code: 1,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}
