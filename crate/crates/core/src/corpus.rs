//! Disclosed-report corpus: line-delimited JSON ingestion, validity labels
//! and the stratified train/test split.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate report id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("report {id:?} has status {status:?}, which carries no validity label")]
    Unlabeled { id: String, status: String },
    #[error("split ratio components must be positive, got {train}:{test}")]
    InvalidRatio { train: u32, test: u32 },
}

/// Closed state a reviewer assigned to a report.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Status {
    Resolved,
    Informative,
    NotApplicable,
    Spam,
    Duplicate,
    Other(String),
}

impl Status {
    /// Case-insensitive, whitespace-trimmed parse. Separators inside the
    /// name (space, `-`, `_`) are ignored so "Not Applicable",
    /// "not-applicable" and "NotApplicable" agree.
    pub fn parse(raw: &str) -> Status {
        let trimmed = raw.trim();
        let key: String = trimmed
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_' | '\t'))
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "resolved" => Status::Resolved,
            "informative" => Status::Informative,
            "notapplicable" => Status::NotApplicable,
            "spam" => Status::Spam,
            "duplicate" => Status::Duplicate,
            _ => Status::Other(trimmed.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Status::Resolved => "Resolved",
            Status::Informative => "Informative",
            Status::NotApplicable => "Not Applicable",
            Status::Spam => "Spam",
            Status::Duplicate => "Duplicate",
            Status::Other(s) => s,
        }
    }

    pub fn is_duplicate(&self) -> bool {
        matches!(self, Status::Duplicate)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Status {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Status {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Ok(Status::parse(&raw))
    }
}

/// Ground-truth validity. `Valid` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Invalid,
    Valid,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Invalid),
            1 => Some(Label::Valid),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Invalid => 0,
            Label::Valid => 1,
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Invalid => Label::Valid,
            Label::Valid => Label::Invalid,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(deserializer)?;
        Label::from_bit(bit)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {bit}")))
    }
}

/// Maps a closed status onto the binary ground truth.
///
/// `None` means the report is excluded from classification ground truth:
/// duplicates and any status outside the five known ones.
pub fn map_validity(status: &Status) -> Option<Label> {
    match status {
        Status::Resolved => Some(Label::Valid),
        Status::Informative | Status::NotApplicable | Status::Spam => Some(Label::Invalid),
        Status::Duplicate | Status::Other(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReporterProfile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reputation: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub id: String,
    pub title: String,
    pub body: String,
    pub weakness: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
    pub program: String,
    pub status: Status,
    pub reporter: ReporterProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disclosed_at: Option<NaiveDate>,
    /// Derived from `status` at load time; never read from the file.
    #[serde(skip)]
    pub label: Option<Label>,
}

impl Report {
    /// Text handed to the embedder: title, newline, body.
    pub fn embedding_text(&self) -> String {
        format!("{}\n{}", self.title, self.body)
    }
}

/// Platform reputation with missing values read as zero.
pub fn reputation_of(report: &Report) -> i64 {
    report.reporter.reputation.unwrap_or(0)
}

#[derive(Debug, Deserialize)]
struct RawReporter {
    name: Option<String>,
    reputation: Option<i64>,
    signal: Option<f64>,
    impact: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawReport {
    id: Option<String>,
    title: Option<String>,
    body: Option<String>,
    weakness: Option<String>,
    severity: Option<String>,
    program: Option<String>,
    status: Option<String>,
    reporter: Option<RawReporter>,
    submitted_at: Option<String>,
    disclosed_at: Option<String>,
}

/// A record that was dropped during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOutcome {
    pub reports: Vec<Report>,
    pub skipped: Vec<Diagnostic>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    pub duplicate: usize,
    pub other: usize,
    pub skipped: usize,
}

impl LoadOutcome {
    pub fn summary(&self) -> CorpusSummary {
        let mut summary = CorpusSummary {
            total: self.reports.len(),
            skipped: self.skipped.len(),
            ..CorpusSummary::default()
        };
        for report in &self.reports {
            match (&report.status, report.label) {
                (_, Some(Label::Valid)) => summary.valid += 1,
                (_, Some(Label::Invalid)) => summary.invalid += 1,
                (Status::Duplicate, None) => summary.duplicate += 1,
                (_, None) => summary.other += 1,
            }
        }
        summary
    }
}

pub fn load_corpus(path: &Path) -> Result<LoadOutcome, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text)
}

/// Parses line-delimited report objects. Blank lines are ignored; a
/// malformed or incomplete record is skipped with a diagnostic, while a
/// repeated id aborts the whole load.
pub fn parse_corpus(text: &str) -> Result<LoadOutcome, CorpusError> {
    let mut outcome = LoadOutcome::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(report) => {
                if let Some(&first_line) = seen.get(&report.id) {
                    return Err(CorpusError::DuplicateId {
                        id: report.id,
                        first_line,
                        second_line: line_no,
                    });
                }
                seen.insert(report.id.clone(), line_no);
                outcome.reports.push(report);
            }
            Err(message) => outcome.skipped.push(Diagnostic {
                line: line_no,
                message,
            }),
        }
    }
    Ok(outcome)
}

fn parse_record(line: &str) -> Result<Report, String> {
    let raw: RawReport =
        serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let id = required(raw.id, "id")?;
    let title = required_allow_empty(raw.title, "title")?;
    let body = required_allow_empty(raw.body, "body")?;
    let weakness = required(raw.weakness, "weakness")?;
    let program = required(raw.program, "program")?;
    let status = Status::parse(&required(raw.status, "status")?);
    let raw_reporter = raw.reporter.ok_or_else(|| missing("reporter"))?;
    let name = required(raw_reporter.name, "reporter.name")?;
    for (field, value) in [("signal", raw_reporter.signal), ("impact", raw_reporter.impact)] {
        if value.is_some_and(|v| !v.is_finite()) {
            return Err(format!("reporter.{field} is not finite"));
        }
    }
    let submitted_at = raw
        .submitted_at
        .as_deref()
        .map(|s| parse_date(s).map_err(|e| format!("submitted_at: {e}")))
        .transpose()?;
    let disclosed_at = raw
        .disclosed_at
        .as_deref()
        .map(|s| parse_date(s).map_err(|e| format!("disclosed_at: {e}")))
        .transpose()?;
    let label = map_validity(&status);
    Ok(Report {
        id,
        title,
        body,
        weakness: weakness.trim().to_string(),
        severity: raw.severity.filter(|s| !s.trim().is_empty()),
        program,
        status,
        reporter: ReporterProfile {
            name,
            reputation: raw_reporter.reputation,
            signal: raw_reporter.signal,
            impact: raw_reporter.impact,
        },
        submitted_at,
        disclosed_at,
        label,
    })
}

fn missing(field: &str) -> String {
    format!("missing required field `{field}`")
}

fn required(value: Option<String>, field: &str) -> Result<String, String> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(missing(field)),
    }
}

fn required_allow_empty(value: Option<String>, field: &str) -> Result<String, String> {
    value.ok_or_else(|| missing(field))
}

/// Accepts a calendar date (`2023-04-01`) or a full RFC 3339 timestamp.
pub fn parse_date(raw: &str) -> Result<NaiveDate, String> {
    let raw = raw.trim();
    if let Ok(date) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Ok(date);
    }
    DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.date_naive())
        .map_err(|_| format!("not an ISO-8601 date: {raw:?}"))
}

/// Train:test ratio plus RNG seed. Stratification is always on the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: u32,
    pub test: u32,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 4,
            test: 1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub train: Vec<&'a Report>,
    pub test: Vec<&'a Report>,
}

/// Stratified random split.
///
/// The test side holds `ceil(n * test / (train + test))` reports. Per-class
/// test counts start at the floor of the class quota, leftovers go to the
/// largest remainders, and any class with at least two members keeps at
/// least one report on each side. Within a class, members are ordered by
/// id and shuffled with a seeded ChaCha8 stream, so the result depends
/// only on the set of reports and the seed. Both sides keep corpus order.
pub fn stratified_split<'a>(
    corpus: &'a [Report],
    spec: &SplitSpec,
) -> Result<Split<'a>, CorpusError> {
    if spec.train == 0 || spec.test == 0 {
        return Err(CorpusError::InvalidRatio {
            train: spec.train,
            test: spec.test,
        });
    }
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (idx, report) in corpus.iter().enumerate() {
        let label = report.label.ok_or_else(|| CorpusError::Unlabeled {
            id: report.id.clone(),
            status: report.status.to_string(),
        })?;
        classes[label.bit() as usize].push(idx);
    }
    let sizes = [classes[0].len(), classes[1].len()];
    let test_counts = allocate_test_counts(&sizes, spec.train as u64, spec.test as u64);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_test = vec![false; corpus.len()];
    for (members, &count) in classes.iter_mut().zip(test_counts.iter()) {
        members.sort_by(|&a, &b| corpus[a].id.cmp(&corpus[b].id));
        members.shuffle(&mut rng);
        for &idx in members.iter().take(count) {
            in_test[idx] = true;
        }
    }

    let mut split = Split {
        train: Vec::with_capacity(corpus.len() - test_counts.iter().sum::<usize>()),
        test: Vec::with_capacity(test_counts.iter().sum()),
    };
    for (report, test) in corpus.iter().zip(in_test) {
        if test {
            split.test.push(report);
        } else {
            split.train.push(report);
        }
    }
    Ok(split)
}

/// Number of reports per class that go to the test side.
pub fn allocate_test_counts(sizes: &[usize], train: u64, test: u64) -> Vec<usize> {
    let denom = train + test;
    let total: u64 = sizes.iter().map(|&s| s as u64).sum();
    let target = (total * test).div_ceil(denom);

    let mut counts: Vec<u64> = sizes.iter().map(|&s| s as u64 * test / denom).collect();
    let remainders: Vec<u64> = sizes.iter().map(|&s| s as u64 * test % denom).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .cmp(&remainders[a])
            .then(sizes[b].cmp(&sizes[a]))
            .then(a.cmp(&b))
    });
    let mut left = target - counts.iter().sum::<u64>();
    while left > 0 {
        let before = left;
        for &i in &order {
            if left == 0 {
                break;
            }
            if counts[i] < sizes[i] as u64 {
                counts[i] += 1;
                left -= 1;
            }
        }
        if before == left {
            break;
        }
    }

    // surplus = count - exact quota, scaled by denom
    let surplus = |counts: &[u64], j: usize| -> i128 {
        counts[j] as i128 * denom as i128 - sizes[j] as i128 * test as i128
    };
    for i in 0..sizes.len() {
        if sizes[i] < 2 {
            continue;
        }
        if counts[i] == 0 {
            let donor = (0..sizes.len())
                .filter(|&j| j != i && counts[j] > if sizes[j] >= 2 { 1 } else { 0 })
                .max_by_key(|&j| (surplus(&counts, j), std::cmp::Reverse(j)));
            if let Some(j) = donor {
                counts[j] -= 1;
                counts[i] += 1;
            }
        }
        if counts[i] == sizes[i] as u64 {
            let recipient = (0..sizes.len())
                .filter(|&j| {
                    j != i && counts[j] + if sizes[j] >= 2 { 1 } else { 0 } < sizes[j] as u64
                })
                .min_by_key(|&j| (surplus(&counts, j), j));
            if let Some(j) = recipient {
                counts[j] += 1;
                counts[i] -= 1;
            }
        }
    }
    counts.into_iter().map(|c| c as usize).collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn report(id: &str, status: Status) -> Report {
        let label = map_validity(&status);
        Report {
            id: id.to_string(),
            title: format!("Report {id}"),
            body: format!("Body of report {id}"),
            weakness: "Information Disclosure".to_string(),
            severity: None,
            program: "Example Program".to_string(),
            status,
            reporter: ReporterProfile {
                name: "hunter".to_string(),
                reputation: None,
                signal: None,
                impact: None,
            },
            submitted_at: None,
            disclosed_at: None,
            label,
        }
    }

    pub fn labeled(n_valid: usize, n_invalid: usize) -> Vec<Report> {
        let mut out = Vec::with_capacity(n_valid + n_invalid);
        for i in 0..n_valid {
            out.push(report(&format!("v{i:05}"), Status::Resolved));
        }
        for i in 0..n_invalid {
            out.push(report(&format!("i{i:05}"), Status::Informative));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    const FULL: &str = r#"{"id":"1","title":"t","body":"b","weakness":"Information Disclosure","program":"curl","status":"Resolved","reporter":{"name":"alice","reputation":12}}"#;

    #[test]
    fn map_validity_matches_status_table() {
        assert_eq!(map_validity(&Status::Resolved), Some(Label::Valid));
        assert_eq!(map_validity(&Status::Informative), Some(Label::Invalid));
        assert_eq!(map_validity(&Status::NotApplicable), Some(Label::Invalid));
        assert_eq!(map_validity(&Status::Spam), Some(Label::Invalid));
        assert_eq!(map_validity(&Status::Duplicate), None);
        assert_eq!(map_validity(&Status::Other("Needs more info".into())), None);
    }

    #[test]
    fn status_parsing_normalizes() {
        assert_eq!(Status::parse("  resolved "), Status::Resolved);
        assert_eq!(Status::parse("Not Applicable"), Status::NotApplicable);
        assert_eq!(Status::parse("not-applicable"), Status::NotApplicable);
        assert_eq!(Status::parse("SPAM"), Status::Spam);
        assert_eq!(
            Status::parse(" Needs More Info "),
            Status::Other("Needs More Info".into())
        );
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let outcome = parse_corpus("").unwrap();
        assert!(outcome.reports.is_empty());
        assert!(outcome.skipped.is_empty());
    }

    #[test]
    fn missing_status_is_skipped() {
        let line = FULL.replace(r#""status":"Resolved","#, "");
        let outcome = parse_corpus(&line).unwrap();
        assert_eq!(outcome.reports.len(), 0);
        assert_eq!(outcome.skipped.len(), 1);
        assert!(outcome.skipped[0].message.contains("status"));
    }

    #[test]
    fn well_formed_record_loads_with_label() {
        let outcome = parse_corpus(FULL).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        let r = &outcome.reports[0];
        assert_eq!(r.label, Some(Label::Valid));
        assert_eq!(reputation_of(r), 12);
    }

    #[test]
    fn duplicate_id_reports_both_lines() {
        let text = format!("{FULL}\n\n{FULL}\n");
        match parse_corpus(&text) {
            Err(CorpusError::DuplicateId {
                first_line,
                second_line,
                ..
            }) => assert_eq!((first_line, second_line), (1, 3)),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn bad_date_and_bad_json_are_skipped() {
        let bad_date = FULL.replace(r#""program""#, r#""submitted_at":"yesterday","program""#);
        let text = format!("{bad_date}\n{{not json\n");
        let outcome = parse_corpus(&text).unwrap();
        assert_eq!(outcome.skipped.len(), 2);
        assert_eq!(outcome.skipped[1].line, 2);
    }

    #[test]
    fn dates_accept_date_and_timestamp() {
        assert_eq!(
            parse_date("2023-05-01").unwrap(),
            NaiveDate::from_ymd_opt(2023, 5, 1).unwrap()
        );
        assert_eq!(
            parse_date("2023-05-01T10:20:30.000Z").unwrap(),
            NaiveDate::from_ymd_opt(2023, 5, 1).unwrap()
        );
    }

    #[test]
    fn reputation_missing_is_zero() {
        let mut r = report("a", Status::Resolved);
        assert_eq!(reputation_of(&r), 0);
        r.reporter.reputation = Some(8342);
        assert_eq!(reputation_of(&r), 8342);
        r.reporter.reputation = Some(0);
        assert_eq!(reputation_of(&r), 0);
    }

    #[test]
    fn ten_report_split_keeps_one_invalid_each_side() {
        let corpus = labeled(8, 2);
        let split = stratified_split(&corpus, &SplitSpec::default()).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (8, 2));
        let invalid_test = split
            .test
            .iter()
            .filter(|r| r.label == Some(Label::Invalid))
            .count();
        assert_eq!(invalid_test, 1);
    }

    #[test]
    fn split_is_deterministic() {
        let corpus = labeled(40, 9);
        let spec = SplitSpec {
            seed: 7,
            ..SplitSpec::default()
        };
        let ids = |s: &Split| s.test.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        let a = stratified_split(&corpus, &spec).unwrap();
        let b = stratified_split(&corpus, &spec).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn unlabeled_report_is_fatal() {
        let mut corpus = labeled(3, 1);
        corpus.push(report("dup", Status::Duplicate));
        assert!(matches!(
            stratified_split(&corpus, &SplitSpec::default()),
            Err(CorpusError::Unlabeled { .. })
        ));
    }

    #[test]
    fn zero_ratio_rejected() {
        let corpus = labeled(3, 1);
        let spec = SplitSpec {
            train: 0,
            ..SplitSpec::default()
        };
        assert!(matches!(
            stratified_split(&corpus, &spec),
            Err(CorpusError::InvalidRatio { .. })
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_and_stays_proportional(
            n_valid in 0usize..300,
            n_invalid in 0usize..120,
            train in 1u32..6,
            test in 1u32..4,
            seed in any::<u64>(),
        ) {
            let corpus = labeled(n_valid, n_invalid);
            let spec = SplitSpec { train, test, seed };
            let split = stratified_split(&corpus, &spec).unwrap();
            prop_assert_eq!(split.train.len() + split.test.len(), corpus.len());
            let mut ids: Vec<&str> = split.train.iter().chain(split.test.iter()).map(|r| r.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), corpus.len());
            let frac = test as f64 / (train + test) as f64;
            for (label, n) in [(Label::Valid, n_valid), (Label::Invalid, n_invalid)] {
                let got = split.test.iter().filter(|r| r.label == Some(label)).count() as f64;
                prop_assert!((got - n as f64 * frac).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
