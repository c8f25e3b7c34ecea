//! Prompt assembly for the four experiment settings, verdict parsing, and
//! the classification loop with its append-only run log.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::chat::ChatClient;
use crate::corpus::{Label, Report, Status};
use crate::embedding::{Embedder, EmbeddingError};
use crate::knowledge::{KnowledgeBase, TaxonomyEntry};
use crate::retrieval::{Index, RetrievalError, RetrievalParams};
use crate::scope::{render_scope_block, scope_for, ScopeError, ScopeMap};

pub const OUTPUT_INSTRUCTION: &str = "Output only:\n1 = VALID, 0 = INVALID";
pub const NO_SCOPE_MARKER: &str = "(no scope information available)";
pub const NO_REFERENCES_MARKER: &str = "(no similar reference reports found)";
pub const RETRIEVED_HEADER: &str = "Retrieved reference reports:";
pub const TAXONOMY_TYPE_PREFIX: &str = "Taxonomy type: ";
pub const TAXONOMY_DESCRIPTION_PREFIX: &str = "Taxonomy description: ";
const NEW_REPORT_LEAD: &str = "Now, determine whether the following new report is VALID (1) or INVALID (0).";

const REVIEWER_PERSONA: &str = "You are an expert bug bounty reviewer.";
const ASSISTANT_PERSONA: &str = "You are an expert bug bounty assistant.";
const BASELINE_INSTRUCTION: &str = "Given the following HackerOne report, classify it strictly as:
1 = valid (valid vulnerability report), 0 = invalid (Informative, Not Applicable, Spam).";
const SCOPE_HEADER: &str = "Vendor's in-scope assets and policies:";
const RAG_PREAMBLE: &str = "Below are example reports retrieved from the knowledge base that are semantically similar to the current report. Each example includes the report content, type, and description.

Use them as reasoning references \u{2014} do not classify them again.";

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("report {0:?} has an empty body")]
    EmptyBody(String),
    #[error("report {id:?} has weakness {weakness:?}; the knowledge base covers {filter:?}")]
    WeaknessMismatch {
        id: String,
        weakness: String,
        filter: String,
    },
    #[error("setting {setting} needs {missing}")]
    MissingDependency {
        setting: Setting,
        missing: &'static str,
    },
    #[error("inconsistent prompt inputs: {0}")]
    PromptInputs(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error("run log line {line}: {message}")]
    RunLog { line: usize, message: String },
    #[error("cannot write run log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    Baseline,
    WithScope,
    WithTaxRag,
    WithTaxRagAndScope,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::Baseline,
        Setting::WithScope,
        Setting::WithTaxRag,
        Setting::WithTaxRagAndScope,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Baseline => "baseline",
            Setting::WithScope => "scope",
            Setting::WithTaxRag => "tax-rag",
            Setting::WithTaxRagAndScope => "tax-rag+scope",
        }
    }

    pub fn uses_scope(self) -> bool {
        matches!(self, Setting::WithScope | Setting::WithTaxRagAndScope)
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, Setting::WithTaxRag | Setting::WithTaxRagAndScope)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|setting| setting.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                format!("unknown setting {s:?}; expected baseline, scope, tax-rag or tax-rag+scope")
            })
    }
}

impl Serialize for Setting {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// A retrieved knowledge-base report as it enters the prompt.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub report: &'a Report,
    pub similarity: f64,
    pub taxonomy: Option<&'a TaxonomyEntry>,
}

impl Reference<'_> {
    /// Taxonomy annotation shown in the prompt: only invalid references
    /// carry one.
    pub fn shown_taxonomy(&self) -> Option<&TaxonomyEntry> {
        if self.report.label == Some(Label::Invalid) {
            self.taxonomy
        } else {
            None
        }
    }
}

/// Report text substituted into every template.
pub fn render_report_text(report: &Report) -> String {
    format!(
        "Title: {}\nReported to: {}\nWeakness: {}\n\n{}",
        report.title.trim(),
        report.program.trim(),
        report.weakness.trim(),
        report.body.trim()
    )
}

fn render_references(references: &[Reference<'_>]) -> String {
    if references.is_empty() {
        return NO_REFERENCES_MARKER.to_string();
    }
    let blocks: Vec<String> = references
        .iter()
        .enumerate()
        .map(|(i, reference)| {
            let mut block = format!(
                "Reference report {}:\nTitle: {}\nContent:\n{}",
                i + 1,
                reference.report.title.trim(),
                reference.report.body.trim()
            );
            if let Some(entry) = reference.shown_taxonomy() {
                block.push_str(&format!(
                    "\n{TAXONOMY_TYPE_PREFIX}{} ({})\n{TAXONOMY_DESCRIPTION_PREFIX}{}",
                    entry.category, entry.status, entry.description
                ));
            }
            block
        })
        .collect();
    blocks.join("\n\n")
}

/// Builds the prompt for `setting`.
///
/// `scope_block` is only meaningful for scope settings, where `None`
/// becomes an explicit "no scope information" marker. `references` must be
/// `Some` exactly for the retrieval settings; an empty slice means nothing
/// cleared the similarity threshold.
pub fn build_prompt(
    setting: Setting,
    report: &Report,
    scope_block: Option<&str>,
    references: Option<&[Reference<'_>]>,
) -> Result<String, TriageError> {
    if report.body.trim().is_empty() {
        return Err(TriageError::EmptyBody(report.id.clone()));
    }
    if scope_block.is_some() && !setting.uses_scope() {
        return Err(TriageError::PromptInputs(format!(
            "setting {setting} takes no scope block"
        )));
    }
    if references.is_some() != setting.uses_retrieval() {
        return Err(TriageError::PromptInputs(format!(
            "setting {setting} {} retrieved references",
            if setting.uses_retrieval() { "requires" } else { "takes no" }
        )));
    }
    let report_text = render_report_text(report);
    let scope_section = setting.uses_scope().then(|| {
        format!("{SCOPE_HEADER}\n{}", scope_block.unwrap_or(NO_SCOPE_MARKER))
    });

    let mut sections: Vec<String> = Vec::new();
    match references {
        None => {
            sections.push(REVIEWER_PERSONA.to_string());
            sections.extend(scope_section);
            sections.push(BASELINE_INSTRUCTION.to_string());
            sections.push("Report to evaluate:".to_string());
            sections.push(report_text);
        }
        Some(references) => {
            sections.push(ASSISTANT_PERSONA.to_string());
            sections.extend(scope_section);
            sections.push(RAG_PREAMBLE.to_string());
            sections.push(format!("{RETRIEVED_HEADER}\n{}", render_references(references)));
            sections.push(NEW_REPORT_LEAD.to_string());
            sections.push(format!("Report to evaluate:\n{report_text}"));
        }
    }
    sections.push(OUTPUT_INSTRUCTION.to_string());
    Ok(sections.join("\n\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Valid,
    Invalid,
    Unparsed,
}

impl Verdict {
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Valid => Some(Label::Valid),
            Verdict::Invalid => Some(Label::Invalid),
            Verdict::Unparsed => None,
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Verdict::Valid => serializer.serialize_u8(1),
            Verdict::Invalid => serializer.serialize_u8(0),
            Verdict::Unparsed => serializer.serialize_str("unparsed"),
        }
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bit(u8),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Bit(1) => Ok(Verdict::Valid),
            Raw::Bit(0) => Ok(Verdict::Invalid),
            Raw::Text(t) if t == "unparsed" => Ok(Verdict::Unparsed),
            _ => Err(serde::de::Error::custom("predicted must be 0, 1 or \"unparsed\"")),
        }
    }
}

/// Reads the model's answer.
///
/// The trimmed output is split into alphanumeric tokens and compared
/// case-insensitively; whole-token matching means "INVALID" never counts
/// as "VALID". `1`/`VALID` vote valid, `0`/`INVALID` vote invalid. A
/// single-sided vote decides; no vote or votes on both sides (for example
/// an echoed "1 = VALID, 0 = INVALID") is [`Verdict::Unparsed`].
pub fn parse_verdict(raw_output: &str) -> Verdict {
    let (mut valid, mut invalid) = (false, false);
    for token in raw_output.trim().split(|c: char| !c.is_alphanumeric()) {
        if token == "0" || token.eq_ignore_ascii_case("invalid") {
            invalid = true;
        } else if token == "1" || token.eq_ignore_ascii_case("valid") {
            valid = true;
        }
    }
    match (valid, invalid) {
        (true, false) => Verdict::Valid,
        (false, true) => Verdict::Invalid,
        _ => Verdict::Unparsed,
    }
}

/// Offline stand-in for a chat model: "0" when the retrieved-reference
/// section carries at least one taxonomy description, "1" otherwise.
pub fn mock_chat(prompt: &str) -> String {
    let section = prompt
        .split_once(RETRIEVED_HEADER)
        .map(|(_, rest)| rest.split(NEW_REPORT_LEAD).next().unwrap_or(rest))
        .unwrap_or("");
    let annotated = section
        .lines()
        .any(|line| line.starts_with(TAXONOMY_DESCRIPTION_PREFIX));
    if annotated { "0" } else { "1" }.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyTag {
    pub status: Status,
    pub category: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvidence {
    pub report_id: String,
    pub similarity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<TaxonomyTag>,
}

/// One model verdict with everything needed to audit or replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub report_id: String,
    pub setting: Setting,
    pub model_id: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub trial: u32,
    #[serde(default, skip_serializing_if = "EvalScope::is_test")]
    pub scope: EvalScope,
    #[serde(default)]
    pub label: Option<Label>,
    pub predicted: Verdict,
    pub raw_output: String,
    pub prompt: String,
    #[serde(default)]
    pub retrieved: Vec<RetrievedEvidence>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamp: String,
}

/// Source of record timestamps. Pin it to make run logs reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunClock {
    Fixed(String),
    System,
}

impl RunClock {
    pub fn now(&self) -> String {
        match self {
            RunClock::Fixed(ts) => ts.clone(),
            RunClock::System => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

/// Read-only resources shared by every classification in a run.
#[derive(Debug, Clone, Copy)]
pub struct TriageContext<'a> {
    pub chat: &'a ChatClient,
    pub embedder: Option<&'a Embedder>,
    pub kb: Option<&'a KnowledgeBase>,
    pub index: Option<&'a Index>,
    pub scopes: &'a ScopeMap,
    pub retrieval: RetrievalParams,
    pub clock: &'a RunClock,
    /// Trial number stamped on records and mixed into the chat cache key.
    pub trial: u32,
    pub scope: EvalScope,
}

/// Which reports a run covers: the held-out test split or the whole corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalScope {
    #[default]
    Test,
    All,
}

impl EvalScope {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalScope::Test => "test",
            EvalScope::All => "all",
        }
    }

    fn is_test(&self) -> bool {
        *self == EvalScope::Test
    }
}

impl std::str::FromStr for EvalScope {
    type Err = String;

    fn from_str(raw: &str) -> Result<Self, String> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "test" => Ok(EvalScope::Test),
            "all" => Ok(EvalScope::All),
            other => Err(format!("unknown evaluation scope {other:?}; expected test or all")),
        }
    }
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

struct Retrieval<'a> {
    kb: &'a KnowledgeBase,
    index: &'a Index,
    embedder: &'a Embedder,
}

impl<'a> TriageContext<'a> {
    fn retrieval_parts(&self, setting: Setting) -> Result<Retrieval<'a>, TriageError> {
        let missing = |missing| TriageError::MissingDependency { setting, missing };
        Ok(Retrieval {
            kb: self.kb.ok_or_else(|| missing("a knowledge base"))?,
            index: self.index.ok_or_else(|| missing("a knowledge-base index"))?,
            embedder: self.embedder.ok_or_else(|| missing("an embedding provider"))?,
        })
    }
}

/// Classifies one report: retrieval when the setting asks for it, prompt
/// assembly, one chat call, verdict parsing.
///
/// Input problems (empty body, weakness outside the knowledge base,
/// missing index) are errors raised before any provider call. Provider
/// failures that survive the retry policy produce an `Unparsed` record
/// carrying the error text.
pub fn classify(
    report: &Report,
    setting: Setting,
    ctx: &TriageContext<'_>,
) -> Result<ClassificationRecord, TriageError> {
    if report.body.trim().is_empty() {
        return Err(TriageError::EmptyBody(report.id.clone()));
    }
    let mut record = ClassificationRecord {
        report_id: report.id.clone(),
        setting,
        model_id: ctx.chat.model_id().to_string(),
        temperature: ctx.chat.sampling().temperature,
        trial: ctx.trial,
        scope: ctx.scope,
        label: report.label,
        predicted: Verdict::Unparsed,
        raw_output: String::new(),
        prompt: String::new(),
        retrieved: Vec::new(),
        notes: Vec::new(),
        error: None,
        timestamp: ctx.clock.now(),
    };

    let retrieval = if setting.uses_retrieval() {
        let parts = ctx.retrieval_parts(setting)?;
        if report.weakness != parts.kb.weakness_filter() {
            return Err(TriageError::WeaknessMismatch {
                id: report.id.clone(),
                weakness: report.weakness.clone(),
                filter: parts.kb.weakness_filter().to_string(),
            });
        }
        parts.index.ensure_model(parts.embedder.model_id())?;
        Some(parts)
    } else {
        None
    };

    let mut references = Vec::new();
    if let Some(parts) = &retrieval {
        let query = match parts.embedder.embed(&report.embedding_text()) {
            Ok(query) => query,
            Err(EmbeddingError::Provider(e)) => {
                record.error = Some(format!("embedding provider: {e}"));
                return Ok(record);
            }
            Err(e) => return Err(e.into()),
        };
        let hits = parts.index.top_k_similar(
            &query,
            Some(&report.id),
            &report.weakness,
            ctx.retrieval,
        )?;
        for hit in hits {
            match parts.kb.report(&hit.report_id) {
                Some(found) => references.push(Reference {
                    report: found,
                    similarity: hit.similarity,
                    taxonomy: parts.kb.category_of(&hit.report_id),
                }),
                None => record
                    .notes
                    .push(format!("indexed report {} is missing from the knowledge base", hit.report_id)),
            }
        }
        record.retrieved = references
            .iter()
            .map(|r| RetrievedEvidence {
                report_id: r.report.id.clone(),
                similarity: r.similarity,
                taxonomy: r.shown_taxonomy().map(|e| TaxonomyTag {
                    status: e.status.clone(),
                    category: e.category.clone(),
                    description: e.description.clone(),
                }),
            })
            .collect();
    }

    let scope_block = if setting.uses_scope() {
        match scope_for(report, ctx.scopes).filter(|t| !t.entries.is_empty()) {
            Some(table) => Some(render_scope_block(table)?),
            None => {
                record.notes.push(format!(
                    "no scope information available for program {:?}",
                    report.program.trim()
                ));
                None
            }
        }
    } else {
        None
    };

    record.prompt = build_prompt(
        setting,
        report,
        scope_block.as_deref(),
        retrieval.as_ref().map(|_| references.as_slice()),
    )?;
    match ctx.chat.ask_trial(&record.prompt, ctx.trial) {
        Ok(raw) => {
            record.predicted = parse_verdict(&raw);
            record.raw_output = raw;
        }
        Err(e) => record.error = Some(format!("chat provider: {e}")),
    }
    Ok(record)
}

/// Append-only JSON-lines log of classification records.
pub struct RunLog<W: Write> {
    out: W,
}

impl<W: Write> RunLog<W> {
    pub fn new(out: W) -> Self {
        RunLog { out }
    }

    pub fn append(&mut self, record: &ClassificationRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn parse_run_log(text: &str) -> Result<Vec<ClassificationRecord>, TriageError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| TriageError::RunLog {
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Classifies `reports` with up to `workers` in flight.
///
/// Successful records are appended to `log` in input order as soon as all
/// earlier reports have finished, so the log is identical for any worker
/// count. Results come back in input order.
pub fn classify_batch<W: Write + Send>(
    reports: &[&Report],
    setting: Setting,
    ctx: &TriageContext<'_>,
    workers: usize,
    log: Option<&mut RunLog<W>>,
) -> Result<Vec<Result<ClassificationRecord, TriageError>>, TriageError> {
    struct Pending<'l, W: Write> {
        done: BTreeMap<usize, Result<ClassificationRecord, TriageError>>,
        next: usize,
        flushed: Vec<Result<ClassificationRecord, TriageError>>,
        log: Option<&'l mut RunLog<W>>,
        io_error: Option<std::io::Error>,
    }

    let state = Mutex::new(Pending {
        done: BTreeMap::new(),
        next: 0,
        flushed: Vec::with_capacity(reports.len()),
        log,
        io_error: None,
    });
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, reports.len().max(1)) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                let Some(report) = reports.get(i) else { break };
                let result = classify(report, setting, ctx);
                let mut guard = state.lock().unwrap_or_else(|e| e.into_inner());
                let pending = &mut *guard;
                pending.done.insert(i, result);
                while let Some(result) = pending.done.remove(&pending.next) {
                    if let (Ok(record), Some(log)) = (&result, pending.log.as_deref_mut()) {
                        if pending.io_error.is_none() {
                            if let Err(e) = log.append(record) {
                                pending.io_error = Some(e);
                            }
                        }
                    }
                    pending.flushed.push(result);
                    pending.next += 1;
                }
            });
        }
    });
    let pending = state.into_inner().unwrap_or_else(|e| e.into_inner());
    if let Some(e) = pending.io_error {
        return Err(TriageError::Io(e));
    }
    Ok(pending.flushed)
}
