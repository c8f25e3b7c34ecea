//! Reputation-bias analyses: status ranking, alignment of near-duplicate
//! pairs, median-reputation groups, borderline selection and per-group
//! error rates.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{reputation_of, Label, Report, Status};
use crate::evaluation::{format_full, format_rounded, Metric};
use crate::retrieval::ReportPair;

#[derive(Debug, thiserror::Error)]
pub enum FairnessError {
    #[error("status {0:?} has no rank (only Resolved, Informative, Not Applicable and Spam do)")]
    UnrankableStatus(String),
    #[error("score file line {line}: {message}")]
    Score { line: usize, message: String },
    #[error("score for unknown report {0}")]
    UnknownReport(String),
    #[error("decision threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("pairs file: {0}")]
    Pairs(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusRank {
    pub ordinal: u8,
    pub reputation_delta: i32,
}

/// Resolved > Informative > Not Applicable > Spam, with the reputation
/// change each outcome carries on the platform.
pub fn rank_status(status: &Status) -> Result<StatusRank, FairnessError> {
    let (ordinal, reputation_delta) = match status {
        Status::Resolved => (3, 7),
        Status::Informative => (2, 0),
        Status::NotApplicable => (1, -5),
        Status::Spam => (0, -10),
        other => return Err(FairnessError::UnrankableStatus(other.as_str().to_string())),
    };
    Ok(StatusRank {
        ordinal,
        reputation_delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Aligned,
    Equal,
    Reversed,
}

impl Alignment {
    pub const ALL: [Alignment; 3] = [Alignment::Aligned, Alignment::Equal, Alignment::Reversed];

    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::Aligned => "aligned",
            Alignment::Equal => "equal",
            Alignment::Reversed => "reversed",
        }
    }

    pub fn parse(raw: &str) -> Option<Alignment> {
        Alignment::ALL.into_iter().find(|a| a.as_str() == raw)
    }
}

/// Equal when both reporters have the same reputation; otherwise Aligned
/// when the higher-reputation side received the higher-ranked status.
pub fn classify_alignment(pair: &ReportPair) -> Result<Alignment, FairnessError> {
    let rank_a = rank_status(&pair.status_a)?.ordinal;
    let rank_b = rank_status(&pair.status_b)?.ordinal;
    if pair.reputation_a == pair.reputation_b {
        return Ok(Alignment::Equal);
    }
    let a_is_higher = pair.reputation_a > pair.reputation_b;
    let a_ranked_higher = rank_a > rank_b;
    Ok(if a_is_higher == a_ranked_higher {
        Alignment::Aligned
    } else {
        Alignment::Reversed
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignedPair {
    pub pair: ReportPair,
    pub alignment: Alignment,
}

/// Classifies every pair whose statuses are both rankable; the rest are
/// returned separately.
pub fn classify_pairs(pairs: &[ReportPair]) -> (Vec<AlignedPair>, Vec<ReportPair>) {
    let mut aligned = Vec::new();
    let mut excluded = Vec::new();
    for pair in pairs {
        match classify_alignment(pair) {
            Ok(alignment) => aligned.push(AlignedPair {
                pair: pair.clone(),
                alignment,
            }),
            Err(_) => excluded.push(pair.clone()),
        }
    }
    (aligned, excluded)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentDistribution {
    pub total: u64,
    pub counts: BTreeMap<Alignment, u64>,
    /// Percent of `total`; `None` when there are no pairs.
    pub percentages: BTreeMap<Alignment, Metric>,
}

impl AlignmentDistribution {
    pub fn count(&self, alignment: Alignment) -> u64 {
        self.counts.get(&alignment).copied().unwrap_or(0)
    }

    pub fn percentage(&self, alignment: Alignment) -> Metric {
        self.percentages.get(&alignment).copied().flatten()
    }

    /// Two-decimal percentage strings.
    pub fn rounded_view(&self) -> BTreeMap<Alignment, String> {
        Alignment::ALL
            .into_iter()
            .map(|a| (a, format_rounded(self.percentage(a), 2)))
            .collect()
    }
}

pub fn alignment_distribution(
    alignments: impl IntoIterator<Item = Alignment>,
) -> AlignmentDistribution {
    let mut counts: BTreeMap<Alignment, u64> = Alignment::ALL.into_iter().map(|a| (a, 0)).collect();
    let mut total = 0;
    for a in alignments {
        *counts.entry(a).or_default() += 1;
        total += 1;
    }
    let percentages = counts
        .iter()
        .map(|(&a, &c)| (a, (total > 0).then(|| c as f64 / total as f64 * 100.0)))
        .collect();
    AlignmentDistribution {
        total,
        counts,
        percentages,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub report_id: String,
    pub p_invalid: f64,
}

/// One JSON object per non-blank line. Any malformed line, out-of-range
/// probability or repeated id fails the whole file.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>, FairnessError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord = serde_json::from_str(line).map_err(|e| FairnessError::Score {
            line: line_no,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&record.p_invalid) {
            return Err(FairnessError::Score {
                line: line_no,
                message: format!("p_invalid {} is outside [0, 1]", record.p_invalid),
            });
        }
        if let Some(first) = seen.insert(record.report_id.clone(), line_no) {
            return Err(FairnessError::Score {
                line: line_no,
                message: format!("report {} already scored on line {first}", record.report_id),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_scores(path: &std::path::Path) -> Result<Vec<ScoreRecord>, FairnessError> {
    parse_scores(&std::fs::read_to_string(path)?)
}

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BORDERLINE_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredReport {
    pub report_id: String,
    pub label: Label,
    pub p_invalid: f64,
    pub predicted: Label,
    pub reputation: i64,
}

impl ScoredReport {
    /// Predicted invalid exactly when `p_invalid >= decision_threshold`.
    pub fn from_score(
        report_id: impl Into<String>,
        label: Label,
        p_invalid: f64,
        reputation: i64,
        decision_threshold: f64,
    ) -> Self {
        let predicted = if p_invalid >= decision_threshold {
            Label::Invalid
        } else {
            Label::Valid
        };
        ScoredReport {
            report_id: report_id.into(),
            label,
            p_invalid,
            predicted,
            reputation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    pub records: Vec<ScoredReport>,
    /// Scored reports whose status carries no validity label.
    pub unlabeled: Vec<String>,
}

/// Attaches labels and reputations from the corpus to imported scores.
pub fn join_scores(
    reports: &[Report],
    scores: &[ScoreRecord],
    decision_threshold: f64,
) -> Result<JoinOutcome, FairnessError> {
    if !(0.0..=1.0).contains(&decision_threshold) {
        return Err(FairnessError::InvalidThreshold(decision_threshold));
    }
    let by_id: HashMap<&str, &Report> = reports.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut records = Vec::new();
    let mut unlabeled = Vec::new();
    for score in scores {
        let report = by_id
            .get(score.report_id.as_str())
            .ok_or_else(|| FairnessError::UnknownReport(score.report_id.clone()))?;
        match report.label {
            Some(label) => records.push(ScoredReport::from_score(
                &score.report_id,
                label,
                score.p_invalid,
                reputation_of(report),
                decision_threshold,
            )),
            None => unlabeled.push(score.report_id.clone()),
        }
    }
    Ok(JoinOutcome { records, unlabeled })
}

/// The lower median: element `(n - 1) / 2` of the sorted values.
pub fn lower_median(values: &[i64]) -> Option<i64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Some(sorted[(sorted.len() - 1) / 2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReputationSplit {
    pub median: i64,
    pub high: Vec<ScoredReport>,
    pub low: Vec<ScoredReport>,
}

impl ReputationSplit {
    /// Set when every record tied at or above the median.
    pub fn low_is_empty(&self) -> bool {
        self.low.is_empty()
    }
}

/// Records at or above the lower median go to `high`. `None` for no input.
pub fn split_by_median_reputation(records: &[ScoredReport]) -> Option<ReputationSplit> {
    let reps: Vec<i64> = records.iter().map(|r| r.reputation).collect();
    let median = lower_median(&reps)?;
    let (high, low) = records.iter().cloned().partition(|r| r.reputation >= median);
    Some(ReputationSplit { median, high, low })
}

/// Human-accepted reports the model rejects with confidence.
pub fn select_borderline(records: &[ScoredReport], p_threshold: f64) -> Vec<ScoredReport> {
    records
        .iter()
        .filter(|r| r.p_invalid >= p_threshold && r.label == Label::Valid)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupRates {
    pub tpr: Metric,
    pub fpr: Metric,
    pub fnr: Metric,
    pub val_given_inval: Metric,
    pub inval_given_val: Metric,
    pub n: u64,
}

impl GroupRates {
    pub fn values(&self) -> [Metric; 5] {
        [
            self.tpr,
            self.fpr,
            self.fnr,
            self.val_given_inval,
            self.inval_given_val,
        ]
    }

    /// Field-wise `self - other`, undefined where either side is.
    pub fn delta(&self, other: &GroupRates) -> [Metric; 5] {
        let (a, b) = (self.values(), other.values());
        std::array::from_fn(|i| Some(a[i]? - b[i]?))
    }
}

fn ratio(num: u64, den: u64) -> Metric {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Valid is the positive class: "positive prediction" means the model
/// accepted the report.
pub fn group_rates(records: &[ScoredReport]) -> GroupRates {
    let count = |label: Option<Label>, pred: Option<Label>| {
        records
            .iter()
            .filter(|r| label.is_none_or(|l| r.label == l) && pred.is_none_or(|p| r.predicted == p))
            .count() as u64
    };
    let (v, i) = (Some(Label::Valid), Some(Label::Invalid));
    let tpr = ratio(count(v, v), count(v, None));
    GroupRates {
        tpr,
        fpr: ratio(count(i, v), count(i, None)),
        fnr: tpr.map(|t| 1.0 - t),
        val_given_inval: ratio(count(v, i), count(None, i)),
        inval_given_val: ratio(count(i, v), count(None, v)),
        n: records.len() as u64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRates {
    pub population: String,
    pub median: Option<i64>,
    pub high: GroupRates,
    pub low: GroupRates,
    pub low_empty: bool,
}

/// Splits a population at its own median and rates both halves.
pub fn population_rates(population: &str, records: &[ScoredReport]) -> PopulationRates {
    let split = split_by_median_reputation(records);
    let (median, high, low) = match &split {
        Some(s) => (Some(s.median), s.high.as_slice(), s.low.as_slice()),
        None => (None, &[][..], &[][..]),
    };
    PopulationRates {
        population: population.to_string(),
        median,
        high: group_rates(high),
        low: group_rates(low),
        low_empty: low.is_empty(),
    }
}

pub const RATES_HEADER: [&str; 10] = [
    "population",
    "group",
    "median",
    "n",
    "tpr",
    "fpr",
    "fnr",
    "val_given_inval",
    "inval_given_val",
    "flag",
];

/// One block of high/low/delta rows per population. `places = None`
/// keeps full precision.
pub fn write_rates_csv<W: Write>(
    out: W,
    populations: &[PopulationRates],
    places: Option<u32>,
) -> Result<(), csv::Error> {
    let fmt = |m: Metric| match places {
        Some(p) => format_rounded(m, p),
        None => format_full(m),
    };
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(RATES_HEADER)?;
    for pop in populations {
        let median = pop.median.map_or_else(String::new, |m| m.to_string());
        let flag = if pop.low_empty { "low_group_empty" } else { "" };
        for (group, rates) in [("high", &pop.high), ("low", &pop.low)] {
            let mut row = vec![
                pop.population.clone(),
                group.to_string(),
                median.clone(),
                rates.n.to_string(),
            ];
            row.extend(rates.values().into_iter().map(fmt));
            row.push(flag.to_string());
            writer.write_record(&row)?;
        }
        let mut row = vec![
            pop.population.clone(),
            "delta".to_string(),
            median.clone(),
            String::new(),
        ];
        row.extend(pop.high.delta(&pop.low).into_iter().map(fmt));
        row.push(flag.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub const PAIRS_HEADER: [&str; 9] = [
    "id_a",
    "id_b",
    "weakness",
    "similarity",
    "status_a",
    "status_b",
    "reputation_a",
    "reputation_b",
    "alignment",
];

pub fn write_pairs_csv<W: Write>(out: W, pairs: &[AlignedPair]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(PAIRS_HEADER)?;
    for AlignedPair { pair, alignment } in pairs {
        writer.write_record([
            pair.id_a.as_str(),
            pair.id_b.as_str(),
            pair.weakness.as_str(),
            &format!("{}", pair.similarity),
            pair.status_a.as_str(),
            pair.status_b.as_str(),
            &pair.reputation_a.to_string(),
            &pair.reputation_b.to_string(),
            alignment.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a file written by [`write_pairs_csv`], re-checking each row's
/// alignment against its statuses and reputations.
pub fn parse_pairs_csv<R: Read>(input: R) -> Result<Vec<AlignedPair>, FairnessError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(PAIRS_HEADER) {
        return Err(FairnessError::Pairs(format!(
            "unexpected header {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |what: &str| FairnessError::Pairs(format!("row {}: bad {what}", i + 1));
        let int = |j: usize, what: &str| row[j].parse::<i64>().map_err(|_| bad(what));
        let similarity: f64 = row[3].parse().map_err(|_| bad("similarity"))?;
        let pair = ReportPair {
            id_a: row[0].to_string(),
            id_b: row[1].to_string(),
            weakness: row[2].to_string(),
            similarity,
            status_a: Status::parse(&row[4]),
            status_b: Status::parse(&row[5]),
            reputation_a: int(6, "reputation_a")?,
            reputation_b: int(7, "reputation_b")?,
        };
        let alignment = Alignment::parse(&row[8]).ok_or_else(|| bad("alignment"))?;
        if classify_alignment(&pair)? != alignment {
            return Err(bad("alignment (does not match statuses and reputations)"));
        }
        out.push(AlignedPair { pair, alignment });
    }
    Ok(out)
}
