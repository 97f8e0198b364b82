//! Confusion-matrix metrics, overlap measures, detection matching, subgroup
//! reports and table rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::domain::*;
use crate::error::{CoreError, Result};
use crate::ingest::StratumKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Counts came from box matching, where true negatives do not exist.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub detection: bool,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_, detection: false }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accumulate(mut self, predicted: bool, actual: bool) -> Self {
        self.record(predicted, actual);
        self
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;
    fn add(self, o: Self) -> Self {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
            detection: self.detection || o.detection,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), Add::add)
    }
}

/// Tagged absence of a metric, never a NaN stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Undefined {
    pub reason: &'static str,
}

impl fmt::Display for Undefined {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "undefined: {}", self.reason)
    }
}

pub type MetricValue = std::result::Result<f64, Undefined>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    Npv,
    F1,
    Accuracy,
    Sensitivity,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 7] = [Metric::Precision, Metric::Recall, Metric::Npv, Metric::F1, Metric::Accuracy, Metric::Sensitivity, Metric::Specificity];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::Npv => "NPV",
            Metric::F1 => "F1",
            Metric::Accuracy => "Accuracy",
            Metric::Sensitivity => "Sensitivity",
            Metric::Specificity => "Specificity",
        }
    }

    /// The metric as an exact fraction `(numerator, denominator)`.
    pub fn ratio(self, cm: &ConfusionMatrix) -> std::result::Result<(u64, u64), Undefined> {
        let no_tn = Undefined { reason: "true negatives are undefined for detection matching" };
        let frac = |num: u64, den: u64, reason: &'static str| if den == 0 { Err(Undefined { reason }) } else { Ok((num, den)) };
        match self {
            Metric::Precision => frac(cm.tp, cm.tp + cm.fp, "no positive predictions"),
            Metric::Recall | Metric::Sensitivity => frac(cm.tp, cm.tp + cm.fn_, "no actual positives"),
            Metric::Npv if cm.detection => Err(no_tn),
            Metric::Npv => frac(cm.tn, cm.tn + cm.fn_, "no negative predictions"),
            Metric::Specificity if cm.detection => Err(no_tn),
            Metric::Specificity => frac(cm.tn, cm.tn + cm.fp, "no actual negatives"),
            Metric::Accuracy if cm.detection => Err(no_tn),
            Metric::Accuracy => frac(cm.tp + cm.tn, cm.total(), "empty confusion matrix"),
            Metric::F1 => {
                Metric::Precision.ratio(cm)?;
                Metric::Recall.ratio(cm)?;
                // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn); with tp = 0 and
                // both defined, fp + fn > 0 so the fraction is 0.
                Ok((2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_))
            }
        }
    }

    pub fn value(self, cm: &ConfusionMatrix) -> MetricValue {
        self.ratio(cm).map(|(n, d)| n as f64 / d as f64)
    }

    /// Percentage rounded half-up to two decimals, computed exactly.
    pub fn percent(self, cm: &ConfusionMatrix) -> std::result::Result<FixedPct, Undefined> {
        self.ratio(cm).map(|(n, d)| FixedPct::from_ratio(n, d))
    }
}

pub fn precision(cm: &ConfusionMatrix) -> MetricValue {
    Metric::Precision.value(cm)
}
pub fn recall(cm: &ConfusionMatrix) -> MetricValue {
    Metric::Recall.value(cm)
}
pub fn sensitivity(cm: &ConfusionMatrix) -> MetricValue {
    Metric::Sensitivity.value(cm)
}
pub fn specificity(cm: &ConfusionMatrix) -> MetricValue {
    Metric::Specificity.value(cm)
}
pub fn npv(cm: &ConfusionMatrix) -> MetricValue {
    Metric::Npv.value(cm)
}
pub fn accuracy(cm: &ConfusionMatrix) -> MetricValue {
    Metric::Accuracy.value(cm)
}
pub fn f1(cm: &ConfusionMatrix) -> MetricValue {
    Metric::F1.value(cm)
}

/// Percentage in hundredths (`9856` is `98.56`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedPct(pub u64);

impl FixedPct {
    /// `100 · num / den` rounded half-up to two decimals.
    pub fn from_ratio(num: u64, den: u64) -> Self {
        assert!(den > 0);
        let (num, den) = (num as u128, den as u128);
        FixedPct(((2 * 10_000 * num + den) / (2 * den)) as u64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for FixedPct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

/// Continuous-area intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(CoreError::Usage(format!("dice: mask shapes {}x{} and {}x{} differ", a.height(), a.width(), b.height(), b.width())));
    }
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        na += x as u64;
        nb += y as u64;
        inter += (x && y) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean squared error; the same routine the training losses use.
pub fn regression_mse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    kneexr_nn::loss::mse(preds, targets).map_err(|e| CoreError::Usage(e.to_string()))
}

/// Greedy one-to-one matching. Predictions are taken in the given order
/// (callers sort by confidence); each claims the unmatched ground truth of
/// highest IoU at or above `threshold`.
pub fn match_detections(preds: &[BoundingBox], gts: &[BoundingBox], threshold: f64) -> ConfusionMatrix {
    let mut taken = vec![false; gts.len()];
    let mut cm = ConfusionMatrix { detection: true, ..Default::default() };
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(p, g);
            if v >= threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                cm.tp += 1;
            }
            None => cm.fp += 1,
        }
    }
    cm.fn_ = taken.iter().filter(|t| !**t).count() as u64;
    cm
}

/// Metadata that may be only partly known (fixture records carry just the
/// field they are stratified by).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecordMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_group: Option<AgeGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manufacturer: Option<Manufacturer>,
}

impl From<ScanMeta> for RecordMeta {
    fn from(m: ScanMeta) -> Self {
        RecordMeta { age_group: Some(m.age_group), gender: Some(m.gender), manufacturer: Some(m.manufacturer) }
    }
}

impl RecordMeta {
    fn group(&self, key: StratumKey) -> Option<&'static str> {
        match key {
            StratumKey::AgeGroup => self.age_group.map(Category::label),
            StratumKey::Gender => self.gender.map(Category::label),
            StratumKey::Manufacturer => self.manufacturer.map(Category::label),
        }
    }
}

/// One scan's (or one pre-aggregated block's) contribution to the counts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
    #[serde(default)]
    pub meta: RecordMeta,
    pub contributions: BTreeMap<PathologyId, ConfusionMatrix>,
}

impl EvalRecord {
    fn pooled(&self, pathology: Option<PathologyId>) -> ConfusionMatrix {
        match pathology {
            Some(p) => self.contributions.get(&p).copied().unwrap_or_default(),
            None => self.contributions.values().copied().sum(),
        }
    }
}

pub fn stratum_labels(key: StratumKey) -> Vec<&'static str> {
    match key {
        StratumKey::AgeGroup => AgeGroup::ALL.iter().map(|c| c.label()).collect(),
        StratumKey::Gender => Gender::ALL.iter().map(|c| c.label()).collect(),
        StratumKey::Manufacturer => Manufacturer::ALL.iter().map(|c| c.label()).collect(),
    }
}

pub fn stratum_title(key: StratumKey) -> &'static str {
    match key {
        StratumKey::AgeGroup => "Age Group",
        StratumKey::Gender => "Gender",
        StratumKey::Manufacturer => "Manufacturer",
    }
}

/// Every metric for one row, each exact-rounded or absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub label: String,
    pub cm: ConfusionMatrix,
    pub values: BTreeMap<Metric, Option<FixedPct>>,
}

impl MetricRow {
    pub fn new(label: impl Into<String>, cm: ConfusionMatrix) -> Self {
        let values = Metric::ALL.iter().map(|&m| (m, m.percent(&cm).ok())).collect();
        MetricRow { label: label.into(), cm, values }
    }

    pub fn get(&self, m: Metric) -> Option<FixedPct> {
        self.values[&m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupReport {
    pub stratum: StratumKey,
    pub rows: Vec<MetricRow>,
}

/// Aggregates counts per group of `stratum`. With `pathology = None` every
/// contribution of a record is pooled. Rows follow the enumeration order and
/// are present even when empty.
pub fn subgroup_report(records: &[EvalRecord], stratum: StratumKey, pathology: Option<PathologyId>) -> Result<SubgroupReport> {
    let labels = stratum_labels(stratum);
    let mut sums: BTreeMap<&'static str, ConfusionMatrix> = labels.iter().map(|&l| (l, ConfusionMatrix::default())).collect();
    for (i, r) in records.iter().enumerate() {
        let g = r.meta.group(stratum).ok_or_else(|| {
            CoreError::Usage(format!("record {} ({}) has no {} field", i, r.scan_id.as_deref().unwrap_or("-"), stratum_title(stratum)))
        })?;
        *sums.get_mut(g).unwrap() += r.pooled(pathology);
    }
    Ok(SubgroupReport { stratum, rows: labels.iter().map(|&l| MetricRow::new(l, sums[l])).collect() })
}

/// Row order of the per-pathology table.
pub const TABLE_ORDER: [PathologyId; 7] = [
    PathologyId::JointSpace,
    PathologyId::Sclerosis,
    PathologyId::Osteophytes,
    PathologyId::TibialSpike,
    PathologyId::Alignment,
    PathologyId::SoftTissue,
    PathologyId::Grading,
];

/// Per-pathology rows, one for each pathology that received contributions.
/// `order` fixes the row sequence.
pub fn pathology_rows(records: &[EvalRecord], order: &[PathologyId]) -> Vec<MetricRow> {
    let mut sums: BTreeMap<PathologyId, ConfusionMatrix> = BTreeMap::new();
    for r in records {
        for (p, cm) in &r.contributions {
            *sums.entry(*p).or_default() += *cm;
        }
    }
    order.iter().filter_map(|p| sums.get(p).map(|cm| MetricRow::new(p.table_label(), *cm))).collect()
}

/// A rendered table: header plus string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

const ABSENT: &str = "n/a";

fn cell(v: Option<FixedPct>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |p| p.to_string())
}

impl Table {
    pub fn from_rows(title: &str, first_col: &str, rows: &[MetricRow], metrics: &[Metric]) -> Table {
        let mut header = vec![first_col.to_string()];
        header.extend(metrics.iter().map(|m| format!("{} (%)", m.label())));
        let rows = rows
            .iter()
            .map(|r| {
                let mut cells = vec![r.label.clone()];
                cells.extend(metrics.iter().map(|&m| cell(r.get(m))));
                cells
            })
            .collect();
        Table { title: title.to_string(), header, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    /// Left-aligned first column, right-aligned numbers.
    pub fn to_text(&self) -> String {
        let ncol = self.header.len();
        let mut width = vec![0usize; ncol];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (i, c) in r.iter().enumerate() {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("{:<w$}", c, w = width[i]) } else { format!("{:>w$}", c, w = width[i]) })
                .collect();
            format!("| {} |", cells.join(" | "))
        };
        let rule = format!("+{}+", width.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("+"));
        let mut out = format!("{}\n{rule}\n{}\n{rule}\n", self.title, line(&self.header));
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out.push_str(&rule);
        out.push('\n');
        out
    }
}

pub const TABLE_METRICS: [Metric; 3] = [Metric::Precision, Metric::Recall, Metric::Npv];

pub fn render_pathology_table(rows: &[MetricRow]) -> Table {
    Table::from_rows("Performance Metrics for Detected Pathologies", "Pathology (%)", rows, &TABLE_METRICS)
}

pub fn render_extended_table(rows: &[MetricRow]) -> Table {
    Table::from_rows("All Metrics per Pathology", "Pathology", rows, &Metric::ALL)
}

pub fn render_subgroup_table(report: &SubgroupReport) -> Table {
    let title = match report.stratum {
        StratumKey::AgeGroup => "Performance Metrics by Age Group",
        StratumKey::Gender => "Performance Metrics by Gender Distribution",
        StratumKey::Manufacturer => "Performance Metrics by Manufacturer Type",
    };
    Table::from_rows(title, stratum_title(report.stratum), &report.rows, &TABLE_METRICS)
}

/// Pre-aggregated clinical counts shipped with the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFixture {
    pub version: u32,
    pub trial_scans: u64,
    pub pathology_records: Vec<EvalRecord>,
    pub subgroup_records: BTreeMap<StratumKey, Vec<EvalRecord>>,
}

pub const CLINICAL_FIXTURE_JSON: &str = include_str!("../fixtures/clinical_trial_v1.json");

impl ClinicalFixture {
    pub fn bundled() -> Self {
        serde_json::from_str(CLINICAL_FIXTURE_JSON).expect("bundled fixture parses")
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Parse { path: source.to_string(), line: e.line(), message: e.to_string() })
    }
}
