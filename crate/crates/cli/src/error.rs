use std::path::Path;

use serde_json::json;

use crate::config::SCHEMA_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration {path}: {reason}")]
    ConfigInvalid { path: String, reason: String },
    #[error("I/O error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Module(#[from] hsp_core::Error),
}

impl CliError {
    pub fn config(path: impl AsRef<Path>, reason: impl Into<String>) -> Self {
        CliError::ConfigInvalid { path: path.as_ref().display().to_string(), reason: reason.into() }
    }

    pub fn io(path: impl AsRef<Path>, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), reason: e.to_string() }
    }

    /// 2 for configuration and file problems, 1 for module failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid { .. } | CliError::Io { .. } => 2,
            CliError::Module(hsp_core::Error::Io { .. } | hsp_core::Error::Csv { .. }) => 2,
            CliError::Module(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid { .. } => "ConfigInvalid",
            CliError::Io { .. } => "Io",
            CliError::Module(e) => e.kind(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            CliError::ConfigInvalid { path, .. } | CliError::Io { path, .. } => Some(path),
            CliError::Module(hsp_core::Error::Io { path, .. } | hsp_core::Error::Csv { path, .. }) => Some(path),
            CliError::Module(_) => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "kind": self.kind(), "message": self.to_string(), "path": self.path() },
        })
    }
}
