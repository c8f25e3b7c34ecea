//! Per-stage run manifests. They hold no wall-clock data so a replay with
//! the same inputs reproduces them byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: &'static str,
    pub config_sha256: String,
    pub models: BTreeMap<&'static str, String>,
    pub seeds: BTreeMap<&'static str, u64>,
    pub parameters: BTreeMap<&'static str, Value>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path, shown_as: String) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok(FileDigest {
        path: shown_as,
        sha256: sha256_hex(&bytes),
    })
}

/// Forward-slash path relative to `base` when possible, so manifests do
/// not depend on where the checkout lives.
pub fn display_relative(path: &Path, base: &Path) -> String {
    let Ok(shown) = path.strip_prefix(base) else {
        return path.to_string_lossy().into_owned();
    };
    shown
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

impl Manifest {
    pub fn new(stage: impl Into<String>, config_sha256: String) -> Self {
        Manifest {
            stage: stage.into(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_sha256,
            models: BTreeMap::new(),
            seeds: BTreeMap::new(),
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_display_uses_forward_slashes() {
        let base = Path::new("/work/run");
        assert_eq!(display_relative(Path::new("/work/run/runs/a.jsonl"), base), "runs/a.jsonl");
        assert_eq!(display_relative(Path::new("/elsewhere/x.json"), base), "/elsewhere/x.json");
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
