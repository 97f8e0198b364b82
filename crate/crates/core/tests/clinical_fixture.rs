use std::collections::BTreeMap;
use std::path::Path;

use kneexr_core::domain::Category;
use kneexr_core::ingest::{parse_manifest, StratumKey};
use kneexr_core::metrics::*;

const PATHOLOGY_TABLE: [(&str, &str, &str, &str); 7] = [
    ("Reducing Joint Space", "98.56", "97.29", "98.38"),
    ("Sclerosis", "94.48", "95.09", "97.57"),
    ("Osteophytes", "98.15", "99.00", "99.23"),
    ("Prominent Tibial Spike", "97.38", "98.18", "98.35"),
    ("Alignment Issues in Bone", "94.49", "94.61", "96.52"),
    ("Soft Tissue Anomaly", "97.45", "96.51", "96.67"),
    ("Grading of Osteoarthritis", "95.89", "95.26", "97.01"),
];

const AGE: [(&str, &str, &str, &str); 4] = [
    ("18-40", "97.60", "96.54", "97.23"),
    ("40-60", "96.59", "95.81", "96.51"),
    ("60-75", "95.80", "94.83", "94.60"),
    ("75+", "94.30", "94.70", "95.20"),
];

const GENDER: [(&str, &str, &str, &str); 2] = [("Male", "97.24", "96.50", "97.20"), ("Female", "96.53", "95.78", "96.49")];

const MANUFACTURER: [(&str, &str, &str, &str); 4] = [
    ("GE Healthcare", "97.56", "96.47", "97.20"),
    ("Siemens", "96.56", "95.78", "96.48"),
    ("Philips", "95.78", "94.75", "94.55"),
    ("Others", "94.27", "94.65", "95.16"),
];

fn as_rows(t: &Table) -> Vec<(String, String, String, String)> {
    t.rows.iter().map(|r| (r[0].clone(), r[1].clone(), r[2].clone(), r[3].clone())).collect()
}

fn expect(rows: &[(&str, &str, &str, &str)]) -> Vec<(String, String, String, String)> {
    rows.iter().map(|&(a, b, c, d)| (a.into(), b.into(), c.into(), d.into())).collect()
}

#[test]
fn pathology_table_reproduced() {
    let fx = ClinicalFixture::bundled();
    let t = render_pathology_table(&pathology_rows(&fx.pathology_records, &TABLE_ORDER));
    assert_eq!(as_rows(&t), expect(&PATHOLOGY_TABLE));
    assert!(t.to_text().contains("| Grading of Osteoarthritis |         95.89 |      95.26 |   97.01 |"), "{}", t.to_text());
}

#[test]
fn subgroup_tables_reproduced() {
    let fx = ClinicalFixture::bundled();
    for (key, want) in [(StratumKey::AgeGroup, &AGE[..]), (StratumKey::Gender, &GENDER[..]), (StratumKey::Manufacturer, &MANUFACTURER[..])] {
        let rep = subgroup_report(&fx.subgroup_records[&key], key, None).unwrap();
        assert_eq!(as_rows(&render_subgroup_table(&rep)), expect(want), "{key:?}");
    }
}

#[test]
fn every_stratum_covers_the_trial() {
    let fx = ClinicalFixture::bundled();
    for recs in fx.pathology_records.iter().map(std::slice::from_ref) {
        let total: u64 = recs.iter().flat_map(|r| r.contributions.values()).map(|c| c.total()).sum();
        assert!(total.abs_diff(fx.trial_scans) <= 2);
    }
}

#[test]
fn clinical_manifest_counts_match_its_header() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/clinical_manifest_51.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let header_line = text.lines().find_map(|l| l.strip_prefix("# manufacturer_counts:")).unwrap();
    let declared: BTreeMap<String, usize> = serde_json::from_str(header_line.trim()).unwrap();
    // Plain text count, independent of the parser.
    let mut counted: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = 0;
    for line in text.lines().filter(|l| l.contains("\"scan_id\"")) {
        records += 1;
        let label = line.split("\"manufacturer\": \"").nth(1).unwrap().split('"').next().unwrap();
        *counted.entry(label.to_string()).or_default() += 1;
    }
    assert_eq!(records, 51);
    assert_eq!(counted, declared);
    let m = parse_manifest(&path).unwrap();
    assert_eq!(m.len(), 51);
    let mut parsed: BTreeMap<String, usize> = BTreeMap::new();
    for e in &m.entries {
        *parsed.entry(e.meta.manufacturer.label().to_string()).or_default() += 1;
    }
    assert_eq!(parsed, declared);
}
