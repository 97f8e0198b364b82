//! Scan-level scoring of prediction records against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use kneexr_core::ingest::{DatasetManifest, StratumKey};
use kneexr_core::metrics::{
    match_detections, pathology_rows, render_extended_table, render_pathology_table, render_subgroup_table, subgroup_report, ClinicalFixture, ConfusionMatrix, EvalRecord,
    Metric, MetricRow, Table, TABLE_ORDER,
};
use kneexr_core::{AnnotationSet, BoundingBox, FindingReport, PathologyId, Region};

use crate::config::EvalThresholds;
use crate::error::{CliError, Result};
use crate::run::write_file;

/// Row order for pipeline output; the fixture order plus post-operative.
pub const PIPELINE_ORDER: [PathologyId; 8] = [
    PathologyId::JointSpace,
    PathologyId::Sclerosis,
    PathologyId::Osteophytes,
    PathologyId::TibialSpike,
    PathologyId::Alignment,
    PathologyId::SoftTissue,
    PathologyId::Postop,
    PathologyId::Grading,
];

const BOX_PATHOLOGIES: [PathologyId; 3] = [PathologyId::Sclerosis, PathologyId::Osteophytes, PathologyId::TibialSpike];

pub const SUBGROUP_FILES: [(StratumKey, &str); 3] =
    [(StratumKey::AgeGroup, "table5_age_group"), (StratumKey::Gender, "table6_gender"), (StratumKey::Manufacturer, "table7_manufacturer")];

pub const PATHOLOGY_FILE: &str = "table4_pathologies";

fn gt_boxes(p: PathologyId, a: &AnnotationSet) -> &[BoundingBox] {
    match p {
        PathologyId::Sclerosis => &a.sclerosis_boxes,
        PathologyId::Osteophytes => &a.osteophyte_boxes,
        PathologyId::TibialSpike => &a.tibial_spike_boxes,
        _ => &[],
    }
}

fn pred_boxes(r: &FindingReport, p: PathologyId) -> Vec<BoundingBox> {
    let mut f: Vec<_> = r.findings.get(&p).map(|v| v.iter().collect()).unwrap_or_default();
    f.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    f.iter().filter_map(|f| if let Region::Box(b) = f.region { Some(b) } else { None }).collect()
}

/// Pathologies that produced output on at least one accepted scan.
pub fn active_pathologies(reports: &[FindingReport]) -> BTreeSet<PathologyId> {
    let mut s = BTreeSet::new();
    for r in reports.iter().filter(|r| r.gate.accepted()) {
        s.extend(r.findings.keys().copied());
        if r.joint_space_pred.is_some() {
            s.insert(PathologyId::JointSpace);
        }
        if r.alignment_pred.is_some() {
            s.insert(PathologyId::Alignment);
        }
        if r.grade.is_some() {
            s.insert(PathologyId::Grading);
        }
    }
    s
}

/// Predicted and actual label of one scan for one pathology, `None` when
/// the annotation carries no ground truth for it.
pub fn scan_outcome(p: PathologyId, r: &FindingReport, a: &AnnotationSet, t: &EvalThresholds) -> Option<(bool, bool)> {
    let has = |p| r.findings.get(&p).is_some_and(|v| !v.is_empty());
    match p {
        PathologyId::JointSpace => {
            let gt = a.joint_space_widths?;
            Some((r.joint_space_pred.is_some_and(|w| w.min() < t.joint_space_px), gt.min() < t.joint_space_px))
        }
        PathologyId::Sclerosis | PathologyId::Osteophytes | PathologyId::TibialSpike => Some((has(p), !gt_boxes(p, a).is_empty())),
        PathologyId::Postop => Some((has(p), !a.implant_masks.is_empty())),
        PathologyId::SoftTissue => Some((has(p), !a.soft_tissue_masks.is_empty())),
        PathologyId::Alignment => {
            let gt = a.alignment.as_ref()?;
            Some((r.alignment_pred.is_some_and(|x| x.misaligned_prob >= t.misaligned_prob), gt.misaligned))
        }
        PathologyId::Grading => {
            let gt = a.oa_grade?;
            Some((r.grade.is_some_and(|g| g >= t.positive_grade), gt >= t.positive_grade))
        }
    }
}

/// Scored records plus box-level matching counts.
#[derive(Debug, Clone, Default)]
pub struct Scored {
    pub records: Vec<EvalRecord>,
    pub detection: BTreeMap<PathologyId, ConfusionMatrix>,
    /// Scans in the reports without ground truth.
    pub unlabeled: usize,
}

/// Scores `reports` against `manifest`. Every report id must appear in the
/// manifest. Rejected scans count as negative predictions.
pub fn score(reports: &[FindingReport], manifest: &DatasetManifest, t: &EvalThresholds) -> Result<Scored> {
    let by_id: BTreeMap<&str, _> = manifest.entries.iter().map(|e| (e.scan_id.as_str(), e)).collect();
    let missing: Vec<&str> = reports.iter().map(|r| r.scan_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(CliError::Integrity(format!("{} report ids are not in the manifest: {}", missing.len(), missing.join(", "))));
    }
    let active = active_pathologies(reports);
    let mut sorted: Vec<&FindingReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    let mut out = Scored::default();
    for r in sorted {
        let e = by_id[r.scan_id.as_str()];
        let ann = if e.labeled { manifest.load_annotations(e)? } else { None };
        let Some(ann) = ann else {
            out.unlabeled += 1;
            continue;
        };
        let mut rec = EvalRecord { scan_id: Some(r.scan_id.clone()), meta: e.meta.into(), contributions: BTreeMap::new() };
        for &p in &active {
            if let Some((pred, actual)) = scan_outcome(p, r, &ann, t) {
                rec.contributions.insert(p, ConfusionMatrix::default().accumulate(pred, actual));
            }
            if BOX_PATHOLOGIES.contains(&p) {
                let cm = match_detections(&pred_boxes(r, p), gt_boxes(p, &ann), t.iou);
                *out.detection.entry(p).or_insert(ConfusionMatrix { detection: true, ..Default::default() }) += cm;
            }
        }
        out.records.push(rec);
    }
    Ok(out)
}

/// Named tables in output order.
pub fn pipeline_tables(scored: &Scored, iou: f64) -> Result<Vec<(String, Table)>> {
    let rows = pathology_rows(&scored.records, &PIPELINE_ORDER);
    let mut tables = vec![(PATHOLOGY_FILE.to_string(), render_pathology_table(&rows))];
    for (key, name) in SUBGROUP_FILES {
        tables.push((name.to_string(), render_subgroup_table(&subgroup_report(&scored.records, key, None)?)));
    }
    tables.push(("metrics_all".to_string(), render_extended_table(&rows)));
    let det: Vec<MetricRow> = PIPELINE_ORDER.iter().filter_map(|p| scored.detection.get(p).map(|cm| MetricRow::new(p.table_label(), *cm))).collect();
    let title = format!("Box-level Detection at IoU {iou:.2}");
    tables.push(("detection_iou".to_string(), Table::from_rows(&title, "Pathology", &det, &[Metric::Precision, Metric::Recall, Metric::F1])));
    Ok(tables)
}

pub fn fixture_tables(fx: &ClinicalFixture) -> Result<Vec<(String, Table)>> {
    let rows = pathology_rows(&fx.pathology_records, &TABLE_ORDER);
    let mut tables = vec![(PATHOLOGY_FILE.to_string(), render_pathology_table(&rows))];
    for (key, name) in SUBGROUP_FILES {
        let recs = fx.subgroup_records.get(&key).ok_or_else(|| CliError::Integrity(format!("fixture has no {key:?} records")))?;
        tables.push((name.to_string(), render_subgroup_table(&subgroup_report(recs, key, None)?)));
    }
    tables.push(("metrics_all".to_string(), render_extended_table(&rows)));
    Ok(tables)
}

/// Writes `<name>.csv` and `<name>.txt` per table plus `tables.txt` with all
/// of them. Returns the written paths.
pub fn write_tables(dir: &Path, tables: &[(String, Table)]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut all = String::new();
    for (name, t) in tables {
        for (ext, body) in [("csv", t.to_csv()), ("txt", t.to_text())] {
            let p = dir.join(format!("{name}.{ext}"));
            write_file(&p, body)?;
            written.push(p);
        }
        all.push_str(&t.to_text());
        all.push('\n');
    }
    let p = dir.join("tables.txt");
    write_file(&p, all)?;
    written.push(p);
    Ok(written)
}

pub fn records_jsonl(records: &[EvalRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
}
