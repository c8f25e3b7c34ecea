//! Command-line front end: config loading, stage commands and manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use bounty_core::triage::{EvalScope, Setting};
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{IndexTarget, Workspace};
use crate::config::LoadedConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bounty-triage", version, about = "Bug-bounty report triage experiments")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true, default_value = "bounty.toml")]
    pub config: PathBuf,
    /// Override `out_dir`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Override the split seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the number of retrieved references.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Override the similarity threshold.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Override the number of concurrent classifications.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Stamp every record with this timestamp instead of the wall clock.
    #[arg(long, global = true)]
    pub timestamp: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Kb,
    Corpus,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the corpus and report label counts and skipped lines.
    Ingest,
    /// Stratified train/test split of the labeled reports.
    Split,
    /// Embed reports into a similarity index.
    Index {
        #[arg(long, value_enum, default_value = "kb")]
        target: TargetArg,
    },
    /// Classify the test split (or the whole corpus) under one experiment setting.
    Classify {
        /// baseline, scope, tax-rag or tax-rag+scope; defaults to the config.
        #[arg(long)]
        setting: Option<Setting>,
        /// test or all; defaults to the config's eval_scope.
        #[arg(long)]
        scope: Option<EvalScope>,
        /// Include test reports of every weakness (non-retrieval settings only).
        #[arg(long)]
        all_weaknesses: bool,
    },
    /// Compute metrics from run logs.
    Evaluate {
        /// Run logs to score; defaults to every log under `runs/`.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
    },
    /// Mine differently-adjudicated similar report pairs.
    MinePairs,
    /// Reputation-group error rates from imported classifier scores.
    Fairness,
    /// Run every stage, classifying under all four settings.
    Pipeline,
}

impl Cli {
    fn load(&self) -> Result<LoadedConfig, CliError> {
        let mut loaded = LoadedConfig::load(&self.config)?;
        let config = &mut loaded.config;
        if let Some(out) = &self.out_dir {
            // Flag paths are relative to the working directory, not the config.
            config.out_dir = std::path::absolute(out).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(seed) = self.seed {
            config.split.seed = seed;
        }
        if let Some(k) = self.k {
            config.retrieval.k = k;
        }
        if let Some(threshold) = self.threshold {
            config.retrieval.threshold = threshold;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        if let Some(ts) = &self.timestamp {
            config.timestamp = Some(ts.clone());
        }
        config.validate()?;
        Ok(loaded)
    }
}

/// Runs the selected command and returns its human-readable summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let ws = Workspace::new(cli.load()?)?;
    match &cli.command {
        Command::Ingest => commands::cmd_ingest(&ws),
        Command::Split => commands::cmd_split(&ws),
        Command::Index { target } => commands::cmd_index(
            &ws,
            match target {
                TargetArg::Kb => IndexTarget::Kb,
                TargetArg::Corpus => IndexTarget::Corpus,
            },
        ),
        Command::Classify {
            setting,
            scope,
            all_weaknesses,
        } => commands::cmd_classify(
            &ws,
            setting.unwrap_or(ws.loaded.config.setting),
            scope.unwrap_or(ws.loaded.config.eval_scope),
            *all_weaknesses,
        ),
        Command::Evaluate { runs } => commands::cmd_evaluate(&ws, runs),
        Command::MinePairs => commands::cmd_mine_pairs(&ws),
        Command::Fairness => commands::cmd_fairness(&ws),
        Command::Pipeline => commands::cmd_pipeline(&ws),
    }
}
