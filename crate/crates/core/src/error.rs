//! Error type shared by all solver and harness modules.

use thiserror::Error;

/// Errors produced by model construction, the variational engine, the
/// Monte Carlo harnesses, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition. `field` names the
    /// offending argument or config field.
    #[error("invalid {field}: {message}")]
    InvalidInput { field: String, message: String },

    /// A numeric operation broke down (e.g. a factorization failed after
    /// jitter escalation, or a non-finite intermediate appeared).
    #[error("numeric breakdown in {context}{}", format_jitters(.jitters))]
    NumericBreakdown { context: String, jitters: Vec<f64> },

    /// A text input failed to parse. Locations are 1-based.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Random placement failed its geometric or conditioning constraints
    /// after the allowed number of re-draws.
    #[error("placement failed: {0}")]
    Placement(String),

    /// One or more config fields failed validation; every violation is listed.
    #[error("config validation failed:\n{}", .issues.join("\n"))]
    Config { issues: Vec<String> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidInput {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn breakdown(context: impl Into<String>, jitters: Vec<f64>) -> Self {
        Error::NumericBreakdown {
            context: context.into(),
            jitters,
        }
    }
}

fn format_jitters(jitters: &[f64]) -> String {
    if jitters.is_empty() {
        String::new()
    } else {
        format!(
            " (attempted jitters: {})",
            jitters
                .iter()
                .map(|j| format!("{j:e}"))
                .collect::<Vec<_>>()
                .join(", ")
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
