use std::path::{Path, PathBuf};

use serde_json::json;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] acp_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no checkpoint at {0}; run `acp train` first")]
    MissingCheckpoint(PathBuf),

    #[error("missing {what} at {path}; run `acp {stage}` first")]
    MissingArtifact { what: &'static str, path: PathBuf, stage: &'static str },

    #[error("{0}")]
    Usage(String),

    #[error("server error: {0}")]
    Server(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Usage(_) => "usage",
            CliError::Server(_) => "server",
        }
    }

    /// Single-line JSON object for stderr.
    pub fn to_json_line(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_line_is_single_line() {
        let e = CliError::Config("bad\nvalue".into());
        let line = e.to_json_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"]["kind"], "config");
        let e = CliError::MissingCheckpoint("w/model.ckpt".into());
        assert!(e.to_json_line().contains("no checkpoint"));
    }
}
