use std::path::PathBuf;

use mint_core::MintError;
use serde_json::json;

/// Exit status for a missing prerequisite artifact.
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing prerequisite {}", .0.display())]
    Missing(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] MintError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Missing(_) => "missing_prerequisite",
            CliError::Config(_) => "invalid_config",
            CliError::Usage(_) => "usage",
            CliError::Core(MintError::Artifact { .. }) => "invalid_artifact",
            CliError::Core(MintError::InsufficientSamples { .. }) => "insufficient_samples",
            CliError::Core(_) => "pipeline_error",
            CliError::Io(_) => "io_error",
            CliError::Json(_) => "invalid_json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }

    pub fn path(&self) -> Option<&PathBuf> {
        match self {
            CliError::Missing(p) | CliError::Core(MintError::Artifact { path: p, .. }) => Some(p),
            _ => None,
        }
    }

    /// The single stderr line printed on failure.
    pub fn to_line(&self) -> String {
        let mut v = json!({ "error_code": self.code(), "message": self.to_string() });
        if let Some(p) = self.path() {
            v["path"] = json!(p.display().to_string());
        }
        v.to_string()
    }
}
