//! Confusion matrices and the per-class metric suite. Valid is the
//! positive class throughout.

use std::io::Write;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::Serialize;

use crate::corpus::Label;
use crate::triage::{ClassificationRecord, Verdict};

/// A ratio that is `None` when its denominator is zero.
pub type Metric = Option<f64>;

pub const UNDEFINED: &str = "undefined";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same predictions with the roles of the two classes exchanged.
    pub fn swap_classes(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Tallies (ground truth, prediction) pairs.
pub fn confusion(pairs: impl IntoIterator<Item = (Label, Label)>) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for pair in pairs {
        match pair {
            (Label::Valid, Label::Valid) => cm.tp += 1,
            (Label::Invalid, Label::Valid) => cm.fp += 1,
            (Label::Valid, Label::Invalid) => cm.fn_ += 1,
            (Label::Invalid, Label::Invalid) => cm.tn += 1,
        }
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: Metric,
    pub rec_val: Metric,
    pub rec_inval: Metric,
    pub pre_val: Metric,
    pub pre_inval: Metric,
    pub f1_val: Metric,
    pub f1_inval: Metric,
    pub macro_f1: Metric,
    pub n: u64,
    pub n_unparsed: u64,
}

impl MetricsReport {
    /// The eight metrics in table order.
    pub fn values(&self) -> [Metric; 8] {
        [
            self.acc,
            self.rec_val,
            self.rec_inval,
            self.pre_val,
            self.pre_inval,
            self.f1_val,
            self.f1_inval,
            self.macro_f1,
        ]
    }
}

pub const METRIC_NAMES: [&str; 8] = [
    "acc",
    "rec_val",
    "rec_inval",
    "pre_val",
    "pre_inval",
    "f1_val",
    "f1_inval",
    "macro_f1",
];

fn ratio(num: u64, den: u64) -> Metric {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall. Undefined if either input is;
/// zero when both are zero.
pub fn f1(precision: Metric, recall: Metric) -> Metric {
    let (p, r) = (precision?, recall?);
    if p + r == 0.0 {
        Some(0.0)
    } else {
        Some(2.0 * p * r / (p + r))
    }
}

pub fn macro_average(a: Metric, b: Metric) -> Metric {
    Some((a? + b?) / 2.0)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let rec_val = ratio(cm.tp, cm.tp + cm.fn_);
    let rec_inval = ratio(cm.tn, cm.tn + cm.fp);
    let pre_val = ratio(cm.tp, cm.tp + cm.fp);
    let pre_inval = ratio(cm.tn, cm.tn + cm.fn_);
    let f1_val = f1(pre_val, rec_val);
    let f1_inval = f1(pre_inval, rec_inval);
    MetricsReport {
        acc: ratio(cm.tp + cm.tn, cm.total()),
        rec_val,
        rec_inval,
        pre_val,
        pre_inval,
        f1_val,
        f1_inval,
        macro_f1: macro_average(f1_val, f1_inval),
        n: cm.total(),
        n_unparsed: 0,
    }
}

/// Scores records that carry a ground-truth label. Unparsed verdicts are
/// left out of every denominator and counted in `n_unparsed`; records
/// without a label (excluded statuses) are ignored.
pub fn evaluate_records<'a>(
    records: impl IntoIterator<Item = &'a ClassificationRecord>,
) -> MetricsReport {
    let mut pairs = Vec::new();
    let mut unparsed = 0;
    for record in records {
        let Some(label) = record.label else { continue };
        match record.predicted {
            Verdict::Unparsed => unparsed += 1,
            v => pairs.push((label, v.label().expect("parsed verdict has a label"))),
        }
    }
    let mut report = compute_metrics(&confusion(pairs));
    report.n_unparsed = unparsed;
    report
}

/// Rounds half away from zero at `places` decimals, applied to the
/// shortest decimal representation of `x`; 0.6005 becomes 0.601 even
/// though the nearest binary double is slightly below 0.6005.
pub fn round_half_up(x: f64, places: u32) -> String {
    let shortest = format!("{x}");
    match Decimal::from_str(&shortest) {
        Ok(d) => {
            let mut rounded = d.round_dp_with_strategy(places, RoundingStrategy::MidpointAwayFromZero);
            rounded.rescale(places);
            rounded.to_string()
        }
        Err(_) => format!("{x:.*}", places as usize),
    }
}

pub fn format_full(metric: Metric) -> String {
    metric.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x}"))
}

pub fn format_rounded(metric: Metric, places: u32) -> String {
    metric.map_or_else(|| UNDEFINED.to_string(), |x| round_half_up(x, places))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model_id: String,
    pub setting: String,
    pub report: MetricsReport,
}

pub const METRICS_HEADER: [&str; 12] = [
    "model_id",
    "setting",
    "acc",
    "rec_val",
    "rec_inval",
    "pre_val",
    "pre_inval",
    "f1_val",
    "f1_inval",
    "macro_f1",
    "n",
    "n_unparsed",
];

/// Writes one row per (model, setting). `places = None` keeps full
/// precision; `Some(3)` gives the three-decimal view.
pub fn write_metrics_csv<W: Write>(
    out: W,
    rows: &[MetricsRow],
    places: Option<u32>,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(METRICS_HEADER)?;
    for row in rows {
        let mut fields = vec![row.model_id.clone(), row.setting.clone()];
        fields.extend(row.report.values().into_iter().map(|m| match places {
            Some(p) => format_rounded(m, p),
            None => format_full(m),
        }));
        fields.push(row.report.n.to_string());
        fields.push(row.report.n_unparsed.to_string());
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}
