//! Rejection-reason taxonomy and the annotated exemplar store used as the
//! retrieval knowledge base.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, Report, Status};

/// The shipped taxonomy: twelve Informative categories plus Not
/// Applicable, Duplicate and Spam.
pub const DEFAULT_TAXONOMY_JSON: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate taxonomy category ({status}, {category:?})")]
    DuplicateCategory { status: Status, category: String },
    #[error("taxonomy category ({status}, {category:?}) has an empty description")]
    EmptyDescription { status: Status, category: String },
    #[error("taxonomy category {category:?} has status {status}, which is not a rejection status")]
    NotARejectionStatus { status: Status, category: String },
    #[error("report {id:?} is assigned to more than one taxonomy category")]
    MultipleCategories { id: String },
    #[error("annotation for {id:?} names unknown category ({status}, {category:?})")]
    UnknownCategory {
        id: String,
        status: Status,
        category: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub status: Status,
    pub category: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplar_ids: Vec<String>,
}

impl TaxonomyEntry {
    pub fn key(&self) -> (&Status, &str) {
        (&self.status, self.category.as_str())
    }
}

fn is_rejection_status(status: &Status) -> bool {
    matches!(
        status,
        Status::Informative | Status::NotApplicable | Status::Duplicate | Status::Spam
    )
}

pub fn load_taxonomy(path: &Path) -> Result<Vec<TaxonomyEntry>, KnowledgeError> {
    parse_taxonomy(&read(path)?)
}

pub fn default_taxonomy() -> Vec<TaxonomyEntry> {
    parse_taxonomy(DEFAULT_TAXONOMY_JSON).expect("shipped taxonomy is well-formed")
}

/// Parses a JSON array of `{status, category, description[, exemplar_ids]}`.
pub fn parse_taxonomy(text: &str) -> Result<Vec<TaxonomyEntry>, KnowledgeError> {
    let entries: Vec<TaxonomyEntry> = serde_json::from_str(text)?;
    let mut seen = HashSet::new();
    for entry in &entries {
        if !is_rejection_status(&entry.status) {
            return Err(KnowledgeError::NotARejectionStatus {
                status: entry.status.clone(),
                category: entry.category.clone(),
            });
        }
        if !seen.insert((entry.status.clone(), entry.category.clone())) {
            return Err(KnowledgeError::DuplicateCategory {
                status: entry.status.clone(),
                category: entry.category.clone(),
            });
        }
        if entry.description.trim().is_empty() {
            return Err(KnowledgeError::EmptyDescription {
                status: entry.status.clone(),
                category: entry.category.clone(),
            });
        }
    }
    Ok(entries)
}

pub fn taxonomy_to_json(entries: &[TaxonomyEntry]) -> String {
    serde_json::to_string_pretty(entries).expect("taxonomy serializes")
}

/// One line of the exemplar annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub report_id: String,
    pub status: Status,
    pub category: String,
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, KnowledgeError> {
    parse_annotations(&read(path)?)
}

/// Parses a JSON array of `{report_id, status, category}`. Repeated report
/// ids are rejected here rather than silently overwritten.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, KnowledgeError> {
    let annotations: Vec<Annotation> = serde_json::from_str(text)?;
    let mut seen = HashSet::new();
    for a in &annotations {
        if !seen.insert(a.report_id.as_str()) {
            return Err(KnowledgeError::MultipleCategories {
                id: a.report_id.clone(),
            });
        }
    }
    Ok(annotations)
}

fn read(path: &Path) -> Result<String, KnowledgeError> {
    std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Taxonomy entries plus the reports they are grounded in.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    entries: Vec<TaxonomyEntry>,
    reports: BTreeMap<String, Report>,
    weakness_filter: String,
    by_report: HashMap<String, usize>,
}

impl KnowledgeBase {
    /// Wraps already-linked parts. Fails only if a report id appears in
    /// two entries; every other inconsistency is left to [`validate_kb`].
    pub fn from_parts(
        entries: Vec<TaxonomyEntry>,
        reports: BTreeMap<String, Report>,
        weakness_filter: impl Into<String>,
    ) -> Result<Self, KnowledgeError> {
        let mut by_report = HashMap::new();
        for (idx, entry) in entries.iter().enumerate() {
            for id in &entry.exemplar_ids {
                if by_report.insert(id.clone(), idx).is_some() {
                    return Err(KnowledgeError::MultipleCategories { id: id.clone() });
                }
            }
        }
        Ok(KnowledgeBase {
            entries,
            reports,
            weakness_filter: weakness_filter.into(),
            by_report,
        })
    }

    /// Links annotations into the taxonomy and gathers the knowledge-base
    /// reports from `corpus`: every annotated report that exists there,
    /// plus every valid report carrying `weakness_filter`.
    pub fn assemble(
        mut entries: Vec<TaxonomyEntry>,
        annotations: &[Annotation],
        corpus: &[Report],
        weakness_filter: &str,
    ) -> Result<Self, KnowledgeError> {
        let positions: HashMap<(Status, String), usize> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.status.clone(), e.category.clone()), i))
            .collect();
        for annotation in annotations {
            let key = (annotation.status.clone(), annotation.category.clone());
            let idx = *positions
                .get(&key)
                .ok_or_else(|| KnowledgeError::UnknownCategory {
                    id: annotation.report_id.clone(),
                    status: annotation.status.clone(),
                    category: annotation.category.clone(),
                })?;
            entries[idx].exemplar_ids.push(annotation.report_id.clone());
        }
        let referenced: HashSet<&str> = entries
            .iter()
            .flat_map(|e| e.exemplar_ids.iter().map(String::as_str))
            .collect();
        let reports = corpus
            .iter()
            .filter(|r| {
                referenced.contains(r.id.as_str())
                    || (r.label == Some(Label::Valid) && r.weakness == weakness_filter)
            })
            .map(|r| (r.id.clone(), r.clone()))
            .collect();
        KnowledgeBase::from_parts(entries, reports, weakness_filter)
    }

    pub fn entries(&self) -> &[TaxonomyEntry] {
        &self.entries
    }

    pub fn reports(&self) -> &BTreeMap<String, Report> {
        &self.reports
    }

    pub fn report(&self, id: &str) -> Option<&Report> {
        self.reports.get(id)
    }

    pub fn weakness_filter(&self) -> &str {
        &self.weakness_filter
    }

    /// Rejection category for `report_id`, if it is an annotated exemplar.
    pub fn category_of(&self, report_id: &str) -> Option<&TaxonomyEntry> {
        self.by_report.get(report_id).map(|&idx| &self.entries[idx])
    }

    /// Exemplar count per (status, category), in taxonomy order.
    pub fn exemplar_counts(&self) -> Vec<(String, String, usize)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.status.to_string(),
                    e.category.clone(),
                    e.exemplar_ids.len(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KbDiagnostic {
    DuplicateCategory { status: String, category: String },
    EmptyDescription { status: String, category: String },
    UnresolvedExemplar { report_id: String, category: String },
    ExemplarStatusMismatch {
        report_id: String,
        category: String,
        expected: String,
        found: String,
    },
    UnreferencedInvalid { report_id: String },
    WeaknessMismatch { report_id: String, weakness: String },
}

impl fmt::Display for KbDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KbDiagnostic::DuplicateCategory { status, category } => {
                write!(f, "duplicate category ({status}, {category})")
            }
            KbDiagnostic::EmptyDescription { status, category } => {
                write!(f, "empty description for ({status}, {category})")
            }
            KbDiagnostic::UnresolvedExemplar {
                report_id,
                category,
            } => write!(f, "exemplar {report_id} of {category} is not in the knowledge base"),
            KbDiagnostic::ExemplarStatusMismatch {
                report_id,
                category,
                expected,
                found,
            } => write!(
                f,
                "exemplar {report_id} of {category} has status {found}, expected {expected}"
            ),
            KbDiagnostic::UnreferencedInvalid { report_id } => {
                write!(f, "rejected report {report_id} has no taxonomy category")
            }
            KbDiagnostic::WeaknessMismatch {
                report_id,
                weakness,
            } => write!(f, "report {report_id} has weakness {weakness:?}"),
        }
    }
}

/// Checks every knowledge-base invariant and returns one diagnostic per
/// violation; an empty list means the base is consistent.
///
/// An exemplar must resolve to a stored report whose status equals its
/// category's status. Every stored report without a valid label must be an
/// exemplar, and every stored report must carry the weakness filter.
pub fn validate_kb(kb: &KnowledgeBase) -> Vec<KbDiagnostic> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for entry in &kb.entries {
        if !seen.insert(entry.key()) {
            out.push(KbDiagnostic::DuplicateCategory {
                status: entry.status.to_string(),
                category: entry.category.clone(),
            });
        }
        if entry.description.trim().is_empty() {
            out.push(KbDiagnostic::EmptyDescription {
                status: entry.status.to_string(),
                category: entry.category.clone(),
            });
        }
        for id in &entry.exemplar_ids {
            match kb.reports.get(id) {
                None => out.push(KbDiagnostic::UnresolvedExemplar {
                    report_id: id.clone(),
                    category: entry.category.clone(),
                }),
                Some(report) if report.status != entry.status => {
                    out.push(KbDiagnostic::ExemplarStatusMismatch {
                        report_id: id.clone(),
                        category: entry.category.clone(),
                        expected: entry.status.to_string(),
                        found: report.status.to_string(),
                    })
                }
                Some(_) => {}
            }
        }
    }
    for (id, report) in &kb.reports {
        if report.label != Some(Label::Valid) && kb.category_of(id).is_none() {
            out.push(KbDiagnostic::UnreferencedInvalid {
                report_id: id.clone(),
            });
        }
        if report.weakness != kb.weakness_filter {
            out.push(KbDiagnostic::WeaknessMismatch {
                report_id: id.clone(),
                weakness: report.weakness.clone(),
            });
        }
    }
    out
}
