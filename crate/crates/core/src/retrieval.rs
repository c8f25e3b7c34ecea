//! Exact top-k similarity search restricted to one weakness label, and the
//! similar-pair miner built on the same neighbor lists.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{reputation_of, Report, Status};
use crate::embedding::{dot, EmbeddingError, UnitVector};

pub const INDEX_FORMAT_VERSION: u32 = 1;
/// How report text is turned into embedding input.
pub const EMBEDDED_TEXT_RECIPE: &str = "title + \"\\n\" + body";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("report {0:?} is indexed twice")]
    DuplicateId(String),
    #[error("vector for {id:?} has dimension {found}, index dimension is {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("query has dimension {found}, index dimension is {expected}")]
    QueryDimension { expected: usize, found: usize },
    #[error("index was built with model {indexed:?}, queried with {requested:?}")]
    ModelMismatch { indexed: String, requested: String },
    #[error("index format version {0} is not supported")]
    FormatVersion(u32),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("report {0:?} is not in the index")]
    NotIndexed(String),
    #[error("malformed index artifact: {0}")]
    Artifact(#[from] serde_json::Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("cannot access index file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub k: usize,
    pub threshold: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams { k: 3, threshold: 0.8 }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(RetrievalError::InvalidThreshold(self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub report_id: String,
    pub weakness: String,
    pub status: Status,
    pub vector: UnitVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub report_id: String,
    pub similarity: f64,
}

/// Flat index; queries scan every entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Index {
    format_version: u32,
    model_id: String,
    embedded_text: String,
    dim: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Deserialize)]
struct IndexArtifact {
    format_version: u32,
    model_id: String,
    embedded_text: String,
    dim: usize,
    entries: Vec<IndexEntry>,
}

impl Index {
    pub fn build(
        model_id: impl Into<String>,
        records: impl IntoIterator<Item = IndexEntry>,
    ) -> Result<Index, RetrievalError> {
        let mut seen = HashSet::new();
        let mut dim = None;
        let mut entries = Vec::new();
        for entry in records {
            if !seen.insert(entry.report_id.clone()) {
                return Err(RetrievalError::DuplicateId(entry.report_id));
            }
            let expected = *dim.get_or_insert(entry.vector.dim());
            if entry.vector.dim() != expected {
                return Err(RetrievalError::DimensionMismatch {
                    id: entry.report_id,
                    expected,
                    found: entry.vector.dim(),
                });
            }
            entries.push(entry);
        }
        Ok(Index {
            format_version: INDEX_FORMAT_VERSION,
            model_id: model_id.into(),
            embedded_text: EMBEDDED_TEXT_RECIPE.to_string(),
            dim: dim.unwrap_or(0),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, report_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.report_id == report_id)
    }

    pub fn ensure_model(&self, model_id: &str) -> Result<(), RetrievalError> {
        if self.model_id != model_id {
            return Err(RetrievalError::ModelMismatch {
                indexed: self.model_id.clone(),
                requested: model_id.to_string(),
            });
        }
        Ok(())
    }

    /// Top-k entries by cosine similarity with `query`.
    ///
    /// Candidates must carry `weakness`, differ from `query_id` and not be
    /// duplicates; only similarities at or above the threshold count.
    /// Results are ordered by similarity descending, then report id
    /// ascending.
    pub fn top_k_similar(
        &self,
        query: &UnitVector,
        query_id: Option<&str>,
        weakness: &str,
        params: RetrievalParams,
    ) -> Result<Vec<Hit>, RetrievalError> {
        params.validate()?;
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::QueryDimension {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let mut heap: BinaryHeap<Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(params.k + 1);
        for entry in &self.entries {
            if entry.weakness != weakness
                || entry.status.is_duplicate()
                || Some(entry.report_id.as_str()) == query_id
            {
                continue;
            }
            let similarity = dot(query.as_slice(), entry.vector.as_slice());
            if similarity < params.threshold {
                continue;
            }
            heap.push(Reverse(Ranked {
                similarity,
                id: &entry.report_id,
            }));
            if heap.len() > params.k {
                heap.pop();
            }
        }
        let mut ranked: Vec<Ranked<'_>> = heap.into_iter().map(|Reverse(r)| r).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        Ok(ranked
            .into_iter()
            .map(|r| Hit {
                report_id: r.id.to_string(),
                similarity: r.similarity,
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Index, RetrievalError> {
        let artifact: IndexArtifact = serde_json::from_str(text)?;
        if artifact.format_version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::FormatVersion(artifact.format_version));
        }
        let mut index = Index::build(artifact.model_id, artifact.entries)?;
        if !index.entries.is_empty() && index.dim != artifact.dim {
            return Err(RetrievalError::DimensionMismatch {
                id: index.entries[0].report_id.clone(),
                expected: artifact.dim,
                found: index.dim,
            });
        }
        index.embedded_text = artifact.embedded_text;
        index.dim = artifact.dim;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Index, RetrievalError> {
        Index::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Heap element: greater means more similar, ties favor the smaller id.
#[derive(Debug, Clone, Copy)]
struct Ranked<'a> {
    similarity: f64,
    id: &'a str,
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

/// Two similar reports that reviewers closed differently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPair {
    pub id_a: String,
    pub id_b: String,
    pub weakness: String,
    pub similarity: f64,
    pub status_a: Status,
    pub status_b: Status,
    pub reputation_a: i64,
    pub reputation_b: i64,
}

/// Mines differently-adjudicated near-duplicates.
///
/// Each non-duplicate report contributes its top-k same-weakness neighbors
/// (the classification retrieval rule). A neighbor forms a pair when the
/// two statuses differ. Pairs are keyed by (smaller id, larger id), so the
/// output is independent of corpus order; it is sorted by that key.
pub fn mine_pairs(
    index: &Index,
    corpus: &[Report],
    params: RetrievalParams,
) -> Result<Vec<ReportPair>, RetrievalError> {
    params.validate()?;
    let by_id: HashMap<&str, &Report> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let positions: HashMap<&str, &IndexEntry> = index
        .entries
        .iter()
        .map(|e| (e.report_id.as_str(), e))
        .collect();
    let mut pairs: BTreeMap<(String, String), ReportPair> = BTreeMap::new();
    for report in corpus {
        if report.status.is_duplicate() {
            continue;
        }
        let entry = positions
            .get(report.id.as_str())
            .ok_or_else(|| RetrievalError::NotIndexed(report.id.clone()))?;
        let hits = index.top_k_similar(&entry.vector, Some(&report.id), &report.weakness, params)?;
        for hit in hits {
            let Some(other) = by_id.get(hit.report_id.as_str()) else {
                continue;
            };
            if other.status == report.status || other.status.is_duplicate() {
                continue;
            }
            let (a, b) = if report.id < other.id {
                (report, *other)
            } else {
                (*other, report)
            };
            pairs
                .entry((a.id.clone(), b.id.clone()))
                .or_insert_with(|| ReportPair {
                    id_a: a.id.clone(),
                    id_b: b.id.clone(),
                    weakness: a.weakness.clone(),
                    similarity: hit.similarity,
                    status_a: a.status.clone(),
                    status_b: b.status.clone(),
                    reputation_a: reputation_of(a),
                    reputation_b: reputation_of(b),
                });
        }
    }
    Ok(pairs.into_values().collect())
}
