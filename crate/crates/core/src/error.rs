use thiserror::Error;

/// Errors raised by model, data, optimizer and harness operations.
#[derive(Debug, Error)]
pub enum LabError {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    /// Input outside the mathematical domain of an operation (empty batch, bad label).
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was invoked in a state its contract does not allow.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl LabError {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        LabError::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, LabError::Config(_) | LabError::Parse(_))
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
