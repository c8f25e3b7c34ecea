//! One function per pipeline stage. Each reads its inputs and earlier
//! artifacts, writes its own artifacts into the output directory, and
//! finishes with a manifest under `manifests/`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use bounty_core::cache::ContentCache;
use bounty_core::chat::{ChatClient, HttpChatProvider, MockChat};
use bounty_core::corpus::{parse_corpus, stratified_split, LoadOutcome, Report, SplitSpec};
use bounty_core::embedding::{Embedder, HttpEmbeddingProvider};
use bounty_core::evaluation::{evaluate_records, write_metrics_csv, MetricsRow};
use bounty_core::fairness::{
    alignment_distribution, classify_pairs, Alignment, join_scores, parse_scores, population_rates,
    select_borderline, write_pairs_csv, write_rates_csv,
};
use bounty_core::knowledge::{
    default_taxonomy, parse_annotations, parse_taxonomy, validate_kb, Annotation, KnowledgeBase,
};
use bounty_core::retrieval::{mine_pairs, Index, IndexEntry};
use bounty_core::scope::{parse_scopes, ScopeMap};
use bounty_core::triage::{classify_batch, parse_run_log, EvalScope, RunClock, RunLog, Setting, TriageContext};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ChatSettings, EmbeddingSettings, KbSource, LoadedConfig};
use crate::error::CliError;
use crate::manifest::{display_relative, sha256_hex, FileDigest, Manifest};

pub const INGEST_ARTIFACT: &str = "ingest.json";
pub const SPLIT_ARTIFACT: &str = "split.json";
pub const KB_INDEX_ARTIFACT: &str = "kb.index.json";
pub const KB_REPORT_ARTIFACT: &str = "kb.validation.json";
pub const CORPUS_INDEX_ARTIFACT: &str = "corpus.index.json";
pub const RUNS_DIR: &str = "runs";
pub const METRICS_ARTIFACT: &str = "metrics.csv";
pub const METRICS_ROUNDED_ARTIFACT: &str = "metrics.rounded.csv";
pub const PAIRS_ARTIFACT: &str = "pairs.csv";
pub const ALIGNMENT_ARTIFACT: &str = "alignment.json";
pub const FAIRNESS_ARTIFACT: &str = "fairness.csv";
pub const FAIRNESS_ROUNDED_ARTIFACT: &str = "fairness.rounded.csv";
pub const FAIRNESS_SUMMARY_ARTIFACT: &str = "fairness.json";
pub const MANIFESTS_DIR: &str = "manifests";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexTarget {
    Kb,
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub spec: SplitSpec,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Resolved paths and shared helpers for one invocation.
pub struct Workspace {
    pub loaded: LoadedConfig,
    pub out: PathBuf,
    config_sha256: String,
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    text.into_bytes()
}

impl Workspace {
    pub fn new(loaded: LoadedConfig) -> Result<Self, CliError> {
        let out = loaded.out_dir();
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let config_sha256 = sha256_hex(loaded.config.canonical_json().as_bytes());
        Ok(Workspace {
            loaded,
            out,
            config_sha256,
        })
    }

    fn manifest(&self, stage: impl Into<String>) -> Manifest {
        Manifest::new(stage, self.config_sha256.clone())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, stage: &'static str, name: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        let path = self.artifact(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::StageDependency {
                stage,
                missing: path,
                producer,
            })
        }
    }

    fn read_input(&self, configured: &Path) -> Result<(String, FileDigest), CliError> {
        let path = self.loaded.resolve(configured);
        let bytes = fs::read(&path).map_err(|e| CliError::input(&path, e))?;
        let digest = FileDigest {
            path: display_relative(&path, &self.loaded.base_dir),
            sha256: sha256_hex(&bytes),
        };
        let text = String::from_utf8(bytes).map_err(|e| CliError::input(&path, e))?;
        Ok((text, digest))
    }

    fn read_artifact(&self, path: &Path) -> Result<(String, FileDigest), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let digest = FileDigest {
            path: display_relative(path, &self.out),
            sha256: sha256_hex(text.as_bytes()),
        };
        Ok((text, digest))
    }

    /// Writes through a temporary file so a crash never leaves a
    /// half-written artifact under the final name.
    fn write_artifact(&self, name: &str, bytes: &[u8]) -> Result<FileDigest, CliError> {
        let path = self.artifact(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        })
    }

    fn finish(&self, manifest: &Manifest, file_stem: &str) -> Result<(), CliError> {
        let mut manifest = manifest.clone();
        let mut seen = BTreeSet::new();
        manifest.inputs.retain(|d| seen.insert(d.path.clone()));
        let name = format!("{MANIFESTS_DIR}/{file_stem}.json");
        self.write_artifact(&name, manifest.to_json().as_bytes())?;
        Ok(())
    }

    fn load_corpus(&self) -> Result<(LoadOutcome, FileDigest), CliError> {
        let configured = self.loaded.config.corpus.clone();
        let (text, digest) = self.read_input(&configured)?;
        let outcome =
            parse_corpus(&text).map_err(|e| CliError::input(self.loaded.resolve(&configured), e))?;
        Ok((outcome, digest))
    }

    fn load_split(&self, stage: &'static str) -> Result<(SplitArtifact, FileDigest), CliError> {
        let path = self.require(stage, SPLIT_ARTIFACT, "split")?;
        let (text, digest) = self.read_artifact(&path)?;
        let split: SplitArtifact =
            serde_json::from_str(&text).map_err(|e| CliError::input(&path, e))?;
        if split.spec != self.loaded.config.split {
            return Err(CliError::Pipeline(format!(
                "{} was produced with split {:?} but the config asks for {:?}; rerun split",
                path.display(),
                split.spec,
                self.loaded.config.split
            )));
        }
        Ok((split, digest))
    }

    fn embedder(&self) -> Result<Embedder, CliError> {
        Ok(match &self.loaded.config.embedding {
            EmbeddingSettings::Hashing => Embedder::offline(),
            EmbeddingSettings::Http(settings) => {
                let provider = HttpEmbeddingProvider::new(settings)
                    .map_err(|e| CliError::Config(format!("embedding provider: {e}")))?;
                let mut embedder = Embedder::new(Box::new(provider))
                    .with_max_in_flight(self.loaded.config.workers);
                if let Some(dir) = &settings.cache_dir {
                    embedder = embedder.with_cache(self.cache(dir)?);
                }
                embedder
            }
        })
    }

    fn chat(&self) -> Result<ChatClient, CliError> {
        let client = match &self.loaded.config.chat {
            ChatSettings::Mock => ChatClient::new(Box::new(MockChat)),
            ChatSettings::Http(settings) => {
                let provider = HttpChatProvider::new(settings)
                    .map_err(|e| CliError::Config(format!("chat provider: {e}")))?;
                let mut client = ChatClient::new(Box::new(provider));
                if let Some(dir) = &settings.cache_dir {
                    client = client.with_cache(self.cache(dir)?);
                }
                client
            }
        };
        Ok(client
            .with_sampling(self.loaded.config.sampling)
            .with_max_in_flight(self.loaded.config.workers))
    }

    fn cache(&self, dir: &Path) -> Result<ContentCache, CliError> {
        let dir = self.loaded.resolve(dir);
        ContentCache::new(&dir).map_err(|e| CliError::io(dir, e))
    }

    fn scopes(&self, manifest: &mut Manifest) -> Result<ScopeMap, CliError> {
        let Some(configured) = self.loaded.config.scopes.clone() else {
            manifest.notes.push("no scopes file configured".into());
            return Ok(ScopeMap::new());
        };
        let (text, digest) = self.read_input(&configured)?;
        manifest.inputs.push(digest);
        parse_scopes(&text).map_err(|e| CliError::input(self.loaded.resolve(&configured), e))
    }

    /// Assembles the knowledge base from taxonomy, annotations and the
    /// permitted report pool. Annotations for reports outside the pool
    /// are dropped and noted.
    fn knowledge_base(
        &self,
        stage: &'static str,
        reports: &[Report],
        manifest: &mut Manifest,
    ) -> Result<KnowledgeBase, CliError> {
        let config = &self.loaded.config;
        let taxonomy = match &config.taxonomy {
            Some(configured) => {
                let (text, digest) = self.read_input(configured)?;
                manifest.inputs.push(digest);
                parse_taxonomy(&text).map_err(|e| CliError::input(self.loaded.resolve(configured), e))?
            }
            None => {
                manifest.notes.push("built-in rejection taxonomy".into());
                default_taxonomy()
            }
        };
        let annotations: Vec<Annotation> = match &config.annotations {
            Some(configured) => {
                let (text, digest) = self.read_input(configured)?;
                manifest.inputs.push(digest);
                parse_annotations(&text)
                    .map_err(|e| CliError::input(self.loaded.resolve(configured), e))?
            }
            None => Vec::new(),
        };

        let pool: Vec<Report> = match config.kb_source {
            KbSource::Corpus => reports.to_vec(),
            KbSource::Train => {
                let (split, digest) = self.load_split(stage)?;
                manifest.inputs.push(digest);
                let train: BTreeSet<&str> = split.train_ids.iter().map(String::as_str).collect();
                // Excluded statuses never enter the split but may still be
                // annotated exemplars.
                reports
                    .iter()
                    .filter(|r| train.contains(r.id.as_str()) || r.label.is_none())
                    .cloned()
                    .collect()
            }
        };
        let pool_ids: BTreeSet<&str> = pool.iter().map(|r| r.id.as_str()).collect();
        let (kept, dropped): (Vec<Annotation>, Vec<Annotation>) = annotations
            .into_iter()
            .partition(|a| pool_ids.contains(a.report_id.as_str()));
        if !dropped.is_empty() {
            manifest.notes.push(format!(
                "{} annotated report(s) outside the knowledge-base pool: {}",
                dropped.len(),
                dropped.iter().map(|a| a.report_id.as_str()).collect::<Vec<_>>().join(", ")
            ));
        }
        let pool: Vec<Report> = pool
            .into_iter()
            .filter(|r| r.weakness == config.weakness_filter)
            .collect();
        KnowledgeBase::assemble(taxonomy, &kept, &pool, &config.weakness_filter)
            .map_err(|e| CliError::Pipeline(format!("knowledge base: {e}")))
    }

    fn describe_models(&self, manifest: &mut Manifest, chat: Option<&ChatClient>, embedder: Option<&Embedder>) {
        if let Some(chat) = chat {
            manifest.models.insert("chat", chat.model_id().to_string());
        }
        if let Some(embedder) = embedder {
            manifest.models.insert("embedding", embedder.model_id().to_string());
        }
    }
}

#[derive(Debug, Serialize)]
struct IngestArtifact<'a> {
    summary: bounty_core::corpus::CorpusSummary,
    skipped: &'a [bounty_core::corpus::Diagnostic],
}

pub fn cmd_ingest(ws: &Workspace) -> Result<String, CliError> {
    let (outcome, digest) = ws.load_corpus()?;
    let summary = outcome.summary();
    let mut manifest = ws.manifest("ingest");
    manifest.inputs.push(digest);
    manifest.artifacts.push(ws.write_artifact(
        INGEST_ARTIFACT,
        &pretty_json(&IngestArtifact {
            summary,
            skipped: &outcome.skipped,
        }),
    )?);
    ws.finish(&manifest, "ingest")?;
    Ok(format!(
        "ingested {} reports ({} valid, {} invalid, {} duplicate, {} other); skipped {} malformed line(s)",
        summary.total, summary.valid, summary.invalid, summary.duplicate, summary.other, summary.skipped
    ))
}

pub fn cmd_split(ws: &Workspace) -> Result<String, CliError> {
    let (outcome, digest) = ws.load_corpus()?;
    let spec = ws.loaded.config.split;
    let labeled: Vec<Report> = outcome
        .reports
        .into_iter()
        .filter(|r| r.label.is_some())
        .collect();
    let split = stratified_split(&labeled, &spec).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let artifact = SplitArtifact {
        spec,
        train_ids: split.train.iter().map(|r| r.id.clone()).collect(),
        test_ids: split.test.iter().map(|r| r.id.clone()).collect(),
    };
    let mut manifest = ws.manifest("split");
    manifest.inputs.push(digest);
    manifest.seeds.insert("split", spec.seed);
    manifest.parameters.insert("ratio", json!([spec.train, spec.test]));
    manifest.artifacts.push(ws.write_artifact(SPLIT_ARTIFACT, &pretty_json(&artifact))?);
    ws.finish(&manifest, "split")?;
    Ok(format!(
        "split {} labeled reports into {} train / {} test (seed {})",
        labeled.len(),
        artifact.train_ids.len(),
        artifact.test_ids.len(),
        spec.seed
    ))
}

fn embed_entries<'r>(
    embedder: &Embedder,
    reports: impl IntoIterator<Item = &'r Report>,
) -> Result<Vec<IndexEntry>, CliError> {
    reports
        .into_iter()
        .map(|r| {
            let vector = embedder
                .embed(&r.embedding_text())
                .map_err(|e| CliError::Pipeline(format!("embedding report {}: {e}", r.id)))?;
            Ok(IndexEntry {
                report_id: r.id.clone(),
                weakness: r.weakness.clone(),
                status: r.status.clone(),
                vector,
            })
        })
        .collect()
}

pub fn cmd_index(ws: &Workspace, target: IndexTarget) -> Result<String, CliError> {
    let (outcome, digest) = ws.load_corpus()?;
    let embedder = ws.embedder()?;
    let (stage, stem) = match target {
        IndexTarget::Kb => ("index", "index-kb"),
        IndexTarget::Corpus => ("index", "index-corpus"),
    };
    let mut manifest = ws.manifest(stem);
    manifest.inputs.push(digest);
    ws.describe_models(&mut manifest, None, Some(&embedder));

    let (name, entries) = match target {
        IndexTarget::Kb => {
            let kb = ws.knowledge_base(stage, &outcome.reports, &mut manifest)?;
            let diagnostics = validate_kb(&kb);
            let report = json!({
                "weakness_filter": kb.weakness_filter(),
                "reports": kb.reports().len(),
                "exemplar_counts": kb
                    .exemplar_counts()
                    .into_iter()
                    .map(|(status, category, count)| json!({"status": status, "category": category, "count": count}))
                    .collect::<Vec<_>>(),
                "diagnostics": diagnostics,
            });
            manifest.artifacts.push(ws.write_artifact(KB_REPORT_ARTIFACT, &pretty_json(&report))?);
            if !diagnostics.is_empty() {
                manifest.notes.push(format!("{} knowledge-base diagnostic(s)", diagnostics.len()));
            }
            (KB_INDEX_ARTIFACT, embed_entries(&embedder, kb.reports().values())?)
        }
        IndexTarget::Corpus => (CORPUS_INDEX_ARTIFACT, embed_entries(&embedder, &outcome.reports)?),
    };
    let count = entries.len();
    let index = Index::build(embedder.model_id(), entries).map_err(|e| CliError::Pipeline(e.to_string()))?;
    manifest.parameters.insert("dim", json!(index.dim()));
    manifest.artifacts.push(ws.write_artifact(name, index.to_json().as_bytes())?);
    ws.finish(&manifest, stem)?;
    Ok(format!("indexed {count} reports into {}", ws.artifact(name).display()))
}

pub fn run_log_name(setting: Setting, scope: EvalScope) -> String {
    match scope {
        EvalScope::Test => format!("{RUNS_DIR}/{}.jsonl", setting.as_str()),
        EvalScope::All => format!("{RUNS_DIR}/{}.all.jsonl", setting.as_str()),
    }
}

/// Label used in the metrics `setting` column.
fn setting_label(setting: Setting, scope: EvalScope) -> String {
    match scope {
        EvalScope::Test => setting.as_str().to_string(),
        EvalScope::All => format!("{}:all", setting.as_str()),
    }
}

pub fn cmd_classify(
    ws: &Workspace,
    setting: Setting,
    scope: EvalScope,
    all_weaknesses: bool,
) -> Result<String, CliError> {
    const STAGE: &str = "classify";
    let config = &ws.loaded.config;
    if all_weaknesses && setting.uses_retrieval() {
        return Err(CliError::Config(format!(
            "setting {setting} retrieves from the {:?} knowledge base and cannot take other weaknesses",
            config.weakness_filter
        )));
    }
    // Check prerequisites before doing any work.
    let (split, split_digest) = ws.load_split(STAGE)?;
    let index_path = if setting.uses_retrieval() {
        Some(ws.require(STAGE, KB_INDEX_ARTIFACT, "index --target kb")?)
    } else {
        None
    };

    let (outcome, digest) = ws.load_corpus()?;
    let stem = match scope {
        EvalScope::Test => format!("classify-{}", setting.as_str()),
        EvalScope::All => format!("classify-{}.all", setting.as_str()),
    };
    let mut manifest = ws.manifest(stem.clone());
    manifest.inputs.push(digest);
    manifest.inputs.push(split_digest);
    manifest.seeds.insert("split", split.spec.seed);
    manifest.parameters.insert("setting", json!(setting));
    manifest.parameters.insert("workers", json!(config.workers));
    manifest.parameters.insert("temperature", json!(config.sampling.temperature));
    manifest.parameters.insert("trials", json!(config.sampling.trials));
    manifest.parameters.insert("scope", json!(scope));

    let chat = ws.chat()?;
    let scopes = if setting.uses_scope() {
        ws.scopes(&mut manifest)?
    } else {
        ScopeMap::new()
    };
    let (kb, index, embedder) = match index_path {
        Some(path) => {
            let (text, index_digest) = ws.read_artifact(&path)?;
            manifest.inputs.push(index_digest);
            let index = Index::from_json(&text).map_err(|e| CliError::input(&path, e))?;
            let embedder = ws.embedder()?;
            index
                .ensure_model(embedder.model_id())
                .map_err(|e| CliError::Pipeline(format!("{}: {e}; rebuild the index", path.display())))?;
            let kb = ws.knowledge_base(STAGE, &outcome.reports, &mut manifest)?;
            let indexed: BTreeSet<&str> = index.entries().iter().map(|e| e.report_id.as_str()).collect();
            let expected: BTreeSet<&str> = kb.reports().keys().map(String::as_str).collect();
            if indexed != expected {
                return Err(CliError::Pipeline(format!(
                    "{} does not match the current knowledge base; rerun index --target kb",
                    path.display()
                )));
            }
            manifest.parameters.insert("k", json!(config.retrieval.k));
            manifest.parameters.insert("threshold", json!(config.retrieval.threshold));
            (Some(kb), Some(index), Some(embedder))
        }
        None => (None, None, None),
    };
    ws.describe_models(&mut manifest, Some(&chat), embedder.as_ref());

    let by_id: HashMap<&str, &Report> = outcome.reports.iter().map(|r| (r.id.as_str(), r)).collect();
    let candidates: Vec<&Report> = match scope {
        EvalScope::Test => split
            .test_ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    CliError::Pipeline(format!("split lists report {id}, which is not in the corpus; rerun split"))
                })
            })
            .collect::<Result<_, _>>()?,
        EvalScope::All => outcome.reports.iter().collect(),
    };
    let mut selected = Vec::new();
    let (mut other_weakness, mut empty_body) = (0, 0);
    for report in candidates {
        if !all_weaknesses && report.weakness != config.weakness_filter {
            other_weakness += 1;
        } else if report.body.trim().is_empty() {
            empty_body += 1;
        } else {
            selected.push(report);
        }
    }
    if other_weakness > 0 {
        manifest.notes.push(format!(
            "{other_weakness} {} report(s) outside weakness {:?} not classified",
            scope.as_str(),
            config.weakness_filter
        ));
    }
    if empty_body > 0 {
        manifest.notes.push(format!(
            "{empty_body} {} report(s) with an empty body not classified",
            scope.as_str()
        ));
    }

    let clock = match &config.timestamp {
        Some(ts) => RunClock::Fixed(ts.clone()),
        None => RunClock::System,
    };
    let log_name = run_log_name(setting, scope);
    let log_path = ws.artifact(&log_name);
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = RunLog::new(std::io::BufWriter::new(file));
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut provider_errors = 0;
    for trial in 0..config.sampling.trials {
        let ctx = TriageContext {
            chat: &chat,
            embedder: embedder.as_ref(),
            kb: kb.as_ref(),
            index: index.as_ref(),
            scopes: &scopes,
            retrieval: config.retrieval,
            clock: &clock,
            trial,
            scope,
        };
        let batch = classify_batch(&selected, setting, &ctx, config.workers, Some(&mut log))
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
        for (report, result) in selected.iter().zip(&batch) {
            match result {
                Ok(record) => provider_errors += usize::from(record.error.is_some()),
                Err(e) => failures.push(format!("{} (trial {trial}): {e}", report.id)),
            }
        }
        results.extend(batch);
    }
    drop(log);

    if !failures.is_empty() {
        return Err(CliError::Pipeline(format!(
            "{} report(s) could not be classified: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    if provider_errors > 0 {
        manifest.notes.push(format!("{provider_errors} provider failure(s) recorded as unparsed"));
    }
    let (_, log_digest) = ws.read_artifact(&log_path)?;
    manifest.artifacts.push(FileDigest {
        path: log_name.clone(),
        sha256: log_digest.sha256,
    });
    ws.finish(&manifest, &stem)?;
    Ok(format!(
        "classified {} report(s) with setting {setting} into {}",
        results.len(),
        log_path.display()
    ))
}

pub fn cmd_evaluate(ws: &Workspace, runs: &[PathBuf]) -> Result<String, CliError> {
    let paths: Vec<PathBuf> = if runs.is_empty() {
        let dir = ws.artifact(RUNS_DIR);
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .map(|entries| {
                entries
                    .filter_map(Result::ok)
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                    .collect()
            })
            .unwrap_or_default();
        if found.is_empty() {
            return Err(CliError::StageDependency {
                stage: "evaluate",
                missing: dir.join("<setting>.jsonl"),
                producer: "classify",
            });
        }
        found.sort();
        found
    } else {
        runs.to_vec()
    };

    let mut manifest = ws.manifest("evaluate");
    let mut groups: BTreeMap<(String, String), Vec<bounty_core::triage::ClassificationRecord>> = BTreeMap::new();
    for path in &paths {
        if !path.is_file() {
            return Err(CliError::StageDependency {
                stage: "evaluate",
                missing: path.clone(),
                producer: "classify",
            });
        }
        let (text, digest) = ws.read_artifact(path)?;
        manifest.inputs.push(digest);
        for record in parse_run_log(&text).map_err(|e| CliError::input(path, e))? {
            groups
                .entry((record.model_id.clone(), setting_label(record.setting, record.scope)))
                .or_default()
                .push(record);
        }
    }
    if groups.values().flatten().any(|r| r.trial > 0) {
        manifest
            .notes
            .push("run logs hold repeated trials; every trial counts as one prediction".into());
    }
    let rows: Vec<MetricsRow> = groups
        .into_iter()
        .map(|((model_id, setting), records)| MetricsRow {
            model_id,
            setting,
            report: evaluate_records(&records),
        })
        .collect();
    let mut full = Vec::new();
    write_metrics_csv(&mut full, &rows, None).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut rounded = Vec::new();
    write_metrics_csv(&mut rounded, &rows, Some(3)).map_err(|e| CliError::Pipeline(e.to_string()))?;
    manifest.artifacts.push(ws.write_artifact(METRICS_ARTIFACT, &full)?);
    manifest.artifacts.push(ws.write_artifact(METRICS_ROUNDED_ARTIFACT, &rounded)?);
    ws.finish(&manifest, "evaluate")?;
    Ok(String::from_utf8(rounded).expect("csv is utf-8").trim_end().to_string())
}

pub fn cmd_mine_pairs(ws: &Workspace) -> Result<String, CliError> {
    let index_path = ws.require("mine-pairs", CORPUS_INDEX_ARTIFACT, "index --target corpus")?;
    let (outcome, digest) = ws.load_corpus()?;
    let (text, index_digest) = ws.read_artifact(&index_path)?;
    let index = Index::from_json(&text).map_err(|e| CliError::input(&index_path, e))?;
    let mut manifest = ws.manifest("mine-pairs");
    manifest.inputs.push(digest);
    manifest.inputs.push(index_digest);
    manifest.models.insert("embedding", index.model_id().to_string());
    let params = ws.loaded.config.retrieval;
    manifest.parameters.insert("k", json!(params.k));
    manifest.parameters.insert("threshold", json!(params.threshold));

    let pairs = mine_pairs(&index, &outcome.reports, params).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let (aligned, excluded) = classify_pairs(&pairs);
    if !excluded.is_empty() {
        manifest.notes.push(format!(
            "{} pair(s) involve a status without a rank and are left out of the alignment analysis",
            excluded.len()
        ));
    }
    let distribution = alignment_distribution(aligned.iter().map(|p| p.alignment));
    let mut csv = Vec::new();
    write_pairs_csv(&mut csv, &aligned).map_err(|e| CliError::Pipeline(e.to_string()))?;
    manifest.artifacts.push(ws.write_artifact(PAIRS_ARTIFACT, &csv)?);
    let summary = json!({
        "pairs": aligned.len(),
        "excluded_pairs": excluded.len(),
        "distribution": distribution,
        "percent_rounded": distribution.rounded_view(),
    });
    manifest.artifacts.push(ws.write_artifact(ALIGNMENT_ARTIFACT, &pretty_json(&summary))?);
    ws.finish(&manifest, "mine-pairs")?;
    let view = distribution.rounded_view();
    Ok(format!(
        "mined {} pair(s): aligned {}%, equal {}%, reversed {}%",
        aligned.len(),
        view[&Alignment::Aligned],
        view[&Alignment::Equal],
        view[&Alignment::Reversed],
    ))
}

pub fn cmd_fairness(ws: &Workspace) -> Result<String, CliError> {
    let config = &ws.loaded.config;
    let scores_path = config
        .scores
        .clone()
        .ok_or_else(|| CliError::Config("fairness needs a `scores` file in the config".into()))?;
    let (outcome, digest) = ws.load_corpus()?;
    let (text, scores_digest) = ws.read_input(&scores_path)?;
    let scores = parse_scores(&text).map_err(|e| CliError::input(ws.loaded.resolve(&scores_path), e))?;
    let mut manifest = ws.manifest("fairness");
    manifest.inputs.push(digest);
    manifest.inputs.push(scores_digest);
    manifest
        .parameters
        .insert("decision_threshold", json!(config.fairness.decision_threshold));
    manifest
        .parameters
        .insert("borderline_threshold", json!(config.fairness.borderline_threshold));

    let joined = join_scores(&outcome.reports, &scores, config.fairness.decision_threshold)
        .map_err(|e| CliError::input(ws.loaded.resolve(&scores_path), e))?;
    if !joined.unlabeled.is_empty() {
        manifest.notes.push(format!(
            "{} scored report(s) without a validity label ignored",
            joined.unlabeled.len()
        ));
    }
    let borderline = select_borderline(&joined.records, config.fairness.borderline_threshold);
    let populations = [
        population_rates("all", &joined.records),
        population_rates("borderline", &borderline),
    ];
    let mut full = Vec::new();
    write_rates_csv(&mut full, &populations, None).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut rounded = Vec::new();
    write_rates_csv(&mut rounded, &populations, Some(3)).map_err(|e| CliError::Pipeline(e.to_string()))?;
    manifest.artifacts.push(ws.write_artifact(FAIRNESS_ARTIFACT, &full)?);
    manifest.artifacts.push(ws.write_artifact(FAIRNESS_ROUNDED_ARTIFACT, &rounded)?);
    let summary = json!({
        "scored": joined.records.len(),
        "borderline_ids": borderline.iter().map(|r| r.report_id.as_str()).collect::<Vec<_>>(),
        "populations": populations.iter().map(|p| json!({
            "population": p.population,
            "median_reputation": p.median,
            "high": p.high,
            "low": p.low,
            "low_group_empty": p.low_empty,
        })).collect::<Vec<_>>(),
    });
    manifest
        .artifacts
        .push(ws.write_artifact(FAIRNESS_SUMMARY_ARTIFACT, &pretty_json(&summary))?);
    ws.finish(&manifest, "fairness")?;
    Ok(String::from_utf8(rounded).expect("csv is utf-8").trim_end().to_string())
}

/// Every stage in order, classifying under all four settings.
pub fn cmd_pipeline(ws: &Workspace) -> Result<String, CliError> {
    let mut lines = vec![cmd_ingest(ws)?, cmd_split(ws)?, cmd_index(ws, IndexTarget::Kb)?];
    lines.push(cmd_index(ws, IndexTarget::Corpus)?);
    for setting in Setting::ALL {
        lines.push(cmd_classify(ws, setting, ws.loaded.config.eval_scope, false)?);
    }
    lines.push(cmd_evaluate(ws, &[])?);
    lines.push(cmd_mine_pairs(ws)?);
    if ws.loaded.config.scores.is_some() {
        lines.push(cmd_fairness(ws)?);
    }
    Ok(lines.join("\n"))
}
