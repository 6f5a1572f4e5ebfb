use thiserror::Error;

/// Errors raised by the LGCP library.
///
/// Variants split into two families: problems with what the caller supplied
/// (`InvalidInput`, `Io`, `Infeasible`) and problems that surfaced while
/// computing (`Numerical`, `NonConvergence`).
#[derive(Debug, Error)]
pub enum LgcpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("infeasible prior specification: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no convergence after {iterations} iterations (last criterion {last:.3e}): {context}")]
    NonConvergence {
        iterations: usize,
        last: f64,
        context: String,
    },
}

impl LgcpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LgcpError::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        LgcpError::Numerical(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        LgcpError::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by the caller's data or configuration.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            LgcpError::InvalidInput(_) | LgcpError::Io { .. } | LgcpError::Infeasible(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LgcpError>;
