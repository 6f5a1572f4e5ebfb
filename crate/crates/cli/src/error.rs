//! Command failures and their machine-readable form.

use std::path::Path;

use lgcp::LgcpError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    /// Bad configuration or data; exit code 2.
    Input,
    /// Failure while computing; exit code 1.
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub kind: ErrorKind,
    /// Pipeline stage that failed, e.g. `config` or `fit`.
    pub stage: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn input(stage: &str, message: impl Into<String>, path: Option<&Path>) -> CliError {
        CliError {
            kind: ErrorKind::Input,
            stage: stage.to_string(),
            message: message.into(),
            path: path.map(|p| p.display().to_string()),
        }
    }

    pub fn numerical(stage: &str, message: impl Into<String>) -> CliError {
        CliError {
            kind: ErrorKind::Numerical,
            stage: stage.to_string(),
            message: message.into(),
            path: None,
        }
    }

    /// Classifies a library error raised during `stage`.
    pub fn from_lib(stage: &str, err: LgcpError) -> CliError {
        let path = match &err {
            LgcpError::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError {
            kind: if err.is_input_error() {
                ErrorKind::Input
            } else {
                ErrorKind::Numerical
            },
            stage: stage.to_string(),
            message: err.to_string(),
            path,
        }
    }

    /// Adapter for `map_err`.
    pub fn at(stage: &'static str) -> impl Fn(LgcpError) -> CliError {
        move |e| CliError::from_lib(stage, e)
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Input => 2,
            ErrorKind::Numerical => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", self.message))
    }
}

pub type CliResult<T> = Result<T, CliError>;
