use thiserror::Error;

#[derive(Debug, Error)]
pub enum BmaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerical { message: String, step: Option<usize> },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sampler failed to converge: {message} ({diagnostics})")]
    Convergence { message: String, diagnostics: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BmaError {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            BmaError::Dimension(_) => "dimension",
            BmaError::Validation(_) => "validation",
            BmaError::Contract(_) => "contract",
            BmaError::Numerical { .. } => "numerical",
            BmaError::Degenerate(_) => "degenerate",
            BmaError::Convergence { .. } => "convergence",
            BmaError::Format(_) => "format",
            BmaError::Io(_) => "io",
        }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        BmaError::Numerical {
            message: message.into(),
            step: None,
        }
    }

    pub(crate) fn numerical_at(message: impl Into<String>, step: usize) -> Self {
        BmaError::Numerical {
            message: message.into(),
            step: Some(step),
        }
    }
}

pub type Result<T> = std::result::Result<T, BmaError>;
