//! Vendor scope tables and their rendering into the prompt legend block.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::corpus::Report;

pub const SCOPE_LEGEND: &str = "Legend:
- Asset name: Asset or endpoint name.
- Type: Asset type such as Domain, Source code, or Wildcard.
- Coverage: Whether this asset is in program scope (True = In Scope, False = Out of Scope).";

const NAME_PREFIX: &str = "- Asset name: ";
const TYPE_SEP: &str = " | Type: ";
const COVERAGE_SEP: &str = " | Coverage: ";

#[derive(Debug, Error)]
pub enum ScopeError {
    #[error("cannot read scope file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scope file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("program {0:?} appears twice")]
    DuplicateProgram(String),
    #[error("program {program:?} lists asset ({asset_name:?}, {asset_type:?}) twice")]
    DuplicateAsset {
        program: String,
        asset_name: String,
        asset_type: String,
    },
    #[error("program {program:?} has an asset with an empty name")]
    EmptyAssetName { program: String },
    #[error("asset field {0:?} contains a line break or a field separator")]
    UnrenderableField(String),
    #[error("scope table for {0:?} is empty; omit the scope block instead")]
    EmptyTable(String),
    #[error("line {line}: not a scope entry: {text:?}")]
    BadBlockLine { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeEntry {
    pub asset_name: String,
    pub asset_type: String,
    pub in_scope: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScopeTable {
    pub program: String,
    pub entries: Vec<ScopeEntry>,
}

pub type ScopeMap = BTreeMap<String, ScopeTable>;

/// Program list in file order; duplicate keys are kept so they can be
/// reported instead of silently overwritten.
struct ProgramList(Vec<(String, Vec<ScopeEntry>)>);

impl<'de> Deserialize<'de> for ProgramList {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ListVisitor;
        impl<'de> Visitor<'de> for ListVisitor {
            type Value = ProgramList;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping program names to asset lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<ProgramList, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<ScopeEntry>>()? {
                    out.push((k, v));
                }
                Ok(ProgramList(out))
            }
        }
        deserializer.deserialize_map(ListVisitor)
    }
}

pub fn load_scopes(path: &Path) -> Result<ScopeMap, ScopeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScopeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scopes(&text)
}

/// Parses `{"<program>": [{asset_name, asset_type, in_scope}, ...], ...}`.
/// Program names are trimmed; an empty file yields an empty map.
pub fn parse_scopes(text: &str) -> Result<ScopeMap, ScopeError> {
    if text.trim().is_empty() {
        return Ok(ScopeMap::new());
    }
    let ProgramList(programs) = serde_json::from_str(text)?;
    let mut map = ScopeMap::new();
    for (program, entries) in programs {
        let program = program.trim().to_string();
        let mut assets = HashSet::new();
        for entry in &entries {
            if entry.asset_name.trim().is_empty() {
                return Err(ScopeError::EmptyAssetName { program });
            }
            check_renderable(&entry.asset_name, &[TYPE_SEP])?;
            check_renderable(&entry.asset_type, &[])?;
            if !assets.insert((entry.asset_name.as_str(), entry.asset_type.as_str())) {
                return Err(ScopeError::DuplicateAsset {
                    program,
                    asset_name: entry.asset_name.clone(),
                    asset_type: entry.asset_type.clone(),
                });
            }
        }
        if map.contains_key(&program) {
            return Err(ScopeError::DuplicateProgram(program));
        }
        map.insert(program.clone(), ScopeTable { program, entries });
    }
    Ok(map)
}

fn check_renderable(field: &str, separators: &[&str]) -> Result<(), ScopeError> {
    if field.contains(['\n', '\r']) || separators.iter().any(|s| field.contains(s)) {
        return Err(ScopeError::UnrenderableField(field.to_string()));
    }
    Ok(())
}

/// Scope table for the report's "Reported to" program, matched exactly
/// after trimming.
pub fn scope_for<'a>(report: &Report, scopes: &'a ScopeMap) -> Option<&'a ScopeTable> {
    scopes.get(report.program.trim())
}

pub fn render_entry(entry: &ScopeEntry) -> String {
    format!(
        "{NAME_PREFIX}{}{TYPE_SEP}{}{COVERAGE_SEP}{}",
        entry.asset_name,
        entry.asset_type,
        if entry.in_scope { "True" } else { "False" }
    )
}

/// Legend followed by one line per asset, in file order.
pub fn render_scope_block(table: &ScopeTable) -> Result<String, ScopeError> {
    if table.entries.is_empty() {
        return Err(ScopeError::EmptyTable(table.program.clone()));
    }
    let mut out = String::from(SCOPE_LEGEND);
    for entry in &table.entries {
        out.push('\n');
        out.push_str(&render_entry(entry));
    }
    Ok(out)
}

/// Recovers the entries from a rendered block. Legend lines and blank
/// lines are skipped.
pub fn parse_scope_block(block: &str) -> Result<Vec<ScopeEntry>, ScopeError> {
    let legend: HashSet<&str> = SCOPE_LEGEND.lines().collect();
    let mut entries = Vec::new();
    for (idx, line) in block.lines().enumerate() {
        if line.trim().is_empty() || legend.contains(line) {
            continue;
        }
        let bad = || ScopeError::BadBlockLine {
            line: idx + 1,
            text: line.to_string(),
        };
        let rest = line.strip_prefix(NAME_PREFIX).ok_or_else(bad)?;
        let (head, coverage) = rest.rsplit_once(COVERAGE_SEP).ok_or_else(bad)?;
        let (name, asset_type) = head.split_once(TYPE_SEP).ok_or_else(bad)?;
        let in_scope = match coverage {
            "True" => true,
            "False" => false,
            _ => return Err(bad()),
        };
        entries.push(ScopeEntry {
            asset_name: name.to_string(),
            asset_type: asset_type.to_string(),
            in_scope,
        });
    }
    Ok(entries)
}
