//! The TOML run configuration. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use bounty_core::chat::{ChatProviderConfig, SamplingParams};
use bounty_core::corpus::SplitSpec;
use bounty_core::embedding::EmbeddingProviderConfig;
use bounty_core::fairness::{DEFAULT_BORDERLINE_THRESHOLD, DEFAULT_DECISION_THRESHOLD};
use bounty_core::retrieval::RetrievalParams;
use bounty_core::triage::{EvalScope, Setting};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    /// Defaults to the built-in rejection taxonomy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scopes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default = "default_weakness")]
    pub weakness_filter: String,
    #[serde(default = "default_setting")]
    pub setting: Setting,
    #[serde(default)]
    pub kb_source: KbSource,
    /// Reports classified: the test split or the whole corpus.
    #[serde(default)]
    pub eval_scope: EvalScope,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Fixed timestamp stamped on every record; wall clock when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    #[serde(default)]
    pub chat: ChatSettings,
    #[serde(default)]
    pub fairness: FairnessSettings,
}

/// Which reports may enter the knowledge base.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbSource {
    /// Training side of the split only, so test reports never retrieve
    /// themselves under another id.
    #[default]
    Train,
    Corpus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase")]
pub enum EmbeddingSettings {
    #[default]
    Hashing,
    Http(EmbeddingProviderConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase")]
pub enum ChatSettings {
    #[default]
    Mock,
    Http(ChatProviderConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSettings {
    #[serde(default = "default_decision_threshold")]
    pub decision_threshold: f64,
    #[serde(default = "default_borderline_threshold")]
    pub borderline_threshold: f64,
}

impl Default for FairnessSettings {
    fn default() -> Self {
        FairnessSettings {
            decision_threshold: DEFAULT_DECISION_THRESHOLD,
            borderline_threshold: DEFAULT_BORDERLINE_THRESHOLD,
        }
    }
}

fn default_weakness() -> String {
    "Information Disclosure".into()
}

fn default_setting() -> Setting {
    Setting::Baseline
}

fn default_workers() -> usize {
    4
}

fn default_decision_threshold() -> f64 {
    DEFAULT_DECISION_THRESHOLD
}

fn default_borderline_threshold() -> f64 {
    DEFAULT_BORDERLINE_THRESHOLD
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.retrieval
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.split.train == 0 || self.split.test == 0 {
            return Err(CliError::Config("split ratio parts must both be positive".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if self.weakness_filter.trim().is_empty() {
            return Err(CliError::Config("weakness_filter must not be empty".into()));
        }
        for (name, value) in [
            ("fairness.decision_threshold", self.fairness.decision_threshold),
            ("fairness.borderline_threshold", self.fairness.borderline_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CliError::Config(format!("{name} must be within [0, 1]")));
            }
        }
        if self.sampling.trials == 0 {
            return Err(CliError::Config("sampling.trials must be at least 1".into()));
        }
        if !self.sampling.temperature.is_finite() || self.sampling.temperature < 0.0 {
            return Err(CliError::Config("sampling.temperature must be a non-negative number".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the effective configuration; its hash goes into
    /// every manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = parse_config(&text)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }
}
