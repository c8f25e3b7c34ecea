use std::path::PathBuf;

use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} needs {}; run `{producer}` first", missing.display())]
    StageDependency {
        stage: &'static str,
        missing: PathBuf,
        producer: &'static str,
    },
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("cannot write {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    pub fn input(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Input {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::StageDependency { .. } => "stage_dependency",
            CliError::Input { .. } => "input",
            CliError::Io { .. } => "io",
            CliError::Pipeline(_) => "pipeline",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Pipeline(_) => 1,
            CliError::Config(_) => 2,
            CliError::StageDependency { .. } => 3,
            CliError::Input { .. } => 4,
            CliError::Io { .. } => 5,
        }
    }

    /// The object printed on stderr when a command fails.
    pub fn to_json(&self) -> Value {
        let mut error = json!({
            "kind": self.kind(),
            "message": self.to_string(),
        });
        match self {
            CliError::StageDependency {
                stage,
                missing,
                producer,
            } => {
                error["stage"] = json!(stage);
                error["missing"] = json!(missing.display().to_string());
                error["producer"] = json!(producer);
            }
            CliError::Input { path, .. } | CliError::Io { path, .. } => {
                error["path"] = json!(path.display().to_string());
            }
            _ => {}
        }
        json!({ "error": error })
    }
}
