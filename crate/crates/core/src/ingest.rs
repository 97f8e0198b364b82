//! Manifests, view segregation, pathology selection, stratified splits and
//! preprocessing.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AnnotationSet, Category, PathologyId, RawMeta, Scan, ScanMeta, View};
use crate::error::{CoreError, Result};
use crate::image::{load_image, median_filter, percentile_window, resize, Image};

pub const DEFAULT_TRIAL_FRACTION: f64 = 0.0382;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub image_path: PathBuf,
    pub meta: ScanMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations_path: Option<PathBuf>,
    pub labeled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifestHeader {
    #[serde(default)]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<f64>,
}

/// Entries plus the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub header: Option<ManifestHeader>,
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    scan_id: String,
    image_path: PathBuf,
    meta: RawMeta,
    #[serde(default)]
    annotations_path: Option<PathBuf>,
    labeled: bool,
}

#[derive(Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { header: None, base_dir: base_dir.into(), entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { header: self.header, base_dir: self.base_dir.clone(), entries }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_scan(&self, e: &ManifestEntry) -> Result<Scan> {
        let image = load_image(&self.resolve(&e.image_path))?;
        Ok(Scan { id: e.scan_id.clone(), image, meta: e.meta })
    }

    pub fn load_annotations(&self, e: &ManifestEntry) -> Result<Option<AnnotationSet>> {
        match &e.annotations_path {
            None => Ok(None),
            Some(p) => read_annotations(&self.resolve(p)).map(Some),
        }
    }

    /// Serializes as JSON Lines, header first when present.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "header": h })).unwrap());
            out.push('\n');
        }
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| CoreError::io(path, e))
    }
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Parse { path: path.display().to_string(), line: e.line(), message: e.to_string() })
}

pub fn write_annotations(path: &Path, a: &AnnotationSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec(a).unwrap()).map_err(|e| CoreError::io(path, e))
}

/// Parses manifest text. Blank lines and lines starting with `#` are skipped;
/// an optional `{"header": {..}}` record may precede the entries.
pub fn parse_manifest_str(text: &str, source: &str, base_dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(base_dir, Vec::new());
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let perr = |message: String| CoreError::Parse { path: source.to_string(), line: lineno, message };
        if manifest.entries.is_empty() && manifest.header.is_none() && t.starts_with("{\"header\"") {
            let h: HeaderLine = serde_json::from_str(t).map_err(|e| perr(e.to_string()))?;
            manifest.header = Some(h.header);
            continue;
        }
        let raw: RawEntry = serde_json::from_str(t).map_err(|e| perr(e.to_string()))?;
        let meta = raw.meta.to_meta().map_err(|v| perr(v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))?;
        if raw.scan_id.trim().is_empty() {
            return Err(perr("scan_id: must be non-empty".into()));
        }
        if raw.labeled != raw.annotations_path.is_some() {
            return Err(perr("labeled must be true exactly when annotations_path is present".into()));
        }
        if !seen.insert(raw.scan_id.clone()) {
            return Err(CoreError::Integrity(format!("duplicate scan_id \"{}\" at {source}:{lineno}", raw.scan_id)));
        }
        manifest.entries.push(ManifestEntry {
            scan_id: raw.scan_id,
            image_path: raw.image_path,
            meta,
            annotations_path: raw.annotations_path,
            labeled: raw.labeled,
        });
    }
    Ok(manifest)
}

pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_str(&text, &path.display().to_string(), &base)
}

/// Partitions entries by their view tag; every view key is present.
pub fn segregate_by_view(m: &DatasetManifest) -> BTreeMap<View, DatasetManifest> {
    let mut out: BTreeMap<View, DatasetManifest> = View::ALL.iter().map(|&v| (v, m.with_entries(Vec::new()))).collect();
    for e in &m.entries {
        out.get_mut(&e.meta.view).unwrap().entries.push(e.clone());
    }
    out
}

/// Labeled entries whose annotations carry ground truth for `pathology`.
/// `pathology` is a wire id such as `"sclerosis"` or `"grading"`.
pub fn select_for_pathology(m: &DatasetManifest, pathology: &str) -> Result<DatasetManifest> {
    let p: PathologyId = pathology.parse().map_err(CoreError::Usage)?;
    let mut keep = Vec::new();
    for e in m.entries.iter().filter(|e| e.labeled) {
        if let Some(a) = m.load_annotations(e)? {
            if p.annotated_in(&a) {
                keep.push(e.clone());
            }
        }
    }
    Ok(m.with_entries(keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    AgeGroup,
    Gender,
    Manufacturer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub trial_fraction: f64,
    pub strata: Vec<StratumKey>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { trial_fraction: DEFAULT_TRIAL_FRACTION, strata: vec![StratumKey::AgeGroup, StratumKey::Gender, StratumKey::Manufacturer], seed: 0 }
    }
}

fn stratum_of(meta: &ScanMeta, keys: &[StratumKey]) -> Vec<u8> {
    keys.iter()
        .map(|k| match k {
            StratumKey::AgeGroup => meta.age_group as u8,
            StratumKey::Gender => meta.gender as u8,
            StratumKey::Manufacturer => meta.manufacturer as u8,
        })
        .collect()
}

/// Splits into `(train, trial)`. Within each joint stratum, exactly
/// `round(fraction · size)` entries go to the trial side, chosen by a seeded
/// shuffle. Both sides keep the original manifest order.
pub fn stratified_split(m: &DatasetManifest, spec: &SplitSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    if spec.strata.is_empty() {
        return Err(CoreError::Usage("split strata must be non-empty".into()));
    }
    if !(0.0..1.0).contains(&spec.trial_fraction) {
        return Err(CoreError::Usage(format!("trial_fraction {} outside [0,1)", spec.trial_fraction)));
    }
    let mut keys = spec.strata.clone();
    keys.sort();
    keys.dedup();
    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for (i, e) in m.entries.iter().enumerate() {
        groups.entry(stratum_of(&e.meta, &keys)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut in_trial = vec![false; m.entries.len()];
    for (_, mut idx) in groups {
        let k = (spec.trial_fraction * idx.len() as f64).round() as usize;
        if k == 0 {
            if spec.trial_fraction > 0.0 {
                log::info!("stratum of {} entries receives no trial entries", idx.len());
            }
            continue;
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            in_trial[i] = true;
        }
    }
    let (mut train, mut trial) = (Vec::new(), Vec::new());
    for (e, t) in m.entries.iter().zip(in_trial) {
        if t { trial.push(e.clone()) } else { train.push(e.clone()) }
    }
    Ok((m.with_entries(train), m.with_entries(trial)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: (usize, usize),
    pub intensity_window: (f64, f64),
    pub denoise_kernel: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { target_size: (256, 256), intensity_window: (1.0, 99.0), denoise_kernel: 3 }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.target_size;
        let (lo, hi) = self.intensity_window;
        if h < 64 || w < 64 {
            return Err(CoreError::Spec(format!("target_size {h}x{w} below 64x64")));
        }
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(CoreError::Spec(format!("intensity_window ({lo}, {hi}) must satisfy 0 <= low < high <= 100")));
        }
        if self.denoise_kernel == 0 || self.denoise_kernel % 2 == 0 {
            return Err(CoreError::Spec(format!("denoise_kernel {} must be odd and >= 1", self.denoise_kernel)));
        }
        Ok(())
    }
}

/// Resize, then median filter, then percentile windowing.
pub fn preprocess(img: &Image, spec: &PreprocessSpec) -> Result<Image> {
    spec.validate()?;
    let resized = resize(img, spec.target_size.0, spec.target_size.1);
    let denoised = median_filter(&resized, spec.denoise_kernel);
    Ok(percentile_window(&denoised, spec.intensity_window.0, spec.intensity_window.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AgeGroup, Gender, Manufacturer};

    fn meta(g: Gender, v: View) -> ScanMeta {
        ScanMeta { age_group: AgeGroup::A40To60, gender: g, manufacturer: Manufacturer::Philips, view: v }
    }

    fn entry(id: &str, v: View) -> ManifestEntry {
        ManifestEntry { scan_id: id.into(), image_path: format!("{id}.png").into(), meta: meta(Gender::Male, v), annotations_path: None, labeled: false }
    }

    const LINE: &str = r#"{"scan_id":"S1","image_path":"a.png","meta":{"age_group":"18-40","gender":"Male","manufacturer":"Siemens","view":"AP"},"labeled":false}"#;

    #[test]
    fn three_line_manifest() {
        let text = [LINE.to_string(), LINE.replace("S1", "S2"), LINE.replace("S1", "S3")].join("\n");
        let m = parse_manifest_str(&text, "m.jsonl", Path::new(".")).unwrap();
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let text = format!("{LINE}\n{LINE}\n");
        match parse_manifest_str(&text, "m.jsonl", Path::new(".")) {
            Err(CoreError::Integrity(msg)) => assert!(msg.contains("\"S1\"")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_cites_line_number() {
        let text = format!("# comment\n{LINE}\n{{not json\n");
        match parse_manifest_str(&text, "m.jsonl", Path::new(".")) {
            Err(CoreError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_enum = LINE.replace("18-40", "90+");
        let err = parse_manifest_str(&bad_enum, "m.jsonl", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("meta.age_group: not in enumeration"));
    }

    #[test]
    fn labeled_requires_annotations() {
        let text = LINE.replace("\"labeled\":false", "\"labeled\":true");
        assert!(parse_manifest_str(&text, "m", Path::new(".")).is_err());
    }

    #[test]
    fn header_and_round_trip() {
        let mut m = DatasetManifest::new(".", vec![entry("A", View::Ap), entry("B", View::Lateral)]);
        m.header = Some(ManifestHeader { version: 1, pixel_spacing_mm: Some(0.2) });
        let back = parse_manifest_str(&m.to_jsonl(), "m", Path::new(".")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn segregation_sizes() {
        let m = DatasetManifest::new(".", vec![entry("A", View::Ap), entry("B", View::Ap), entry("C", View::Lateral)]);
        let parts = segregate_by_view(&m);
        assert_eq!(parts[&View::Ap].len(), 2);
        assert_eq!(parts[&View::Lateral].len(), 1);
        assert_eq!(parts[&View::Unknown].len(), 0);
    }

    #[test]
    fn unknown_pathology_is_usage_error() {
        let m = DatasetManifest::new(".", vec![]);
        assert!(matches!(select_for_pathology(&m, "fracture"), Err(CoreError::Usage(_))));
    }

    #[test]
    fn selection_reads_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let mut grade_only = AnnotationSet::default();
        grade_only.oa_grade = Some(2);
        let mut scl = AnnotationSet::default();
        scl.sclerosis_boxes.push(crate::domain::BoundingBox::new(1.0, 1.0, 5.0, 5.0));
        write_annotations(&dir.path().join("a.json"), &grade_only).unwrap();
        write_annotations(&dir.path().join("b.json"), &scl).unwrap();
        let mut a = entry("A", View::Ap);
        a.annotations_path = Some("a.json".into());
        a.labeled = true;
        let mut b = entry("B", View::Ap);
        b.annotations_path = Some("b.json".into());
        b.labeled = true;
        let m = DatasetManifest::new(dir.path(), vec![a, b]);
        let s = select_for_pathology(&m, "sclerosis").unwrap();
        assert_eq!(s.entries.iter().map(|e| e.scan_id.as_str()).collect::<Vec<_>>(), vec!["B"]);
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let m = DatasetManifest::new(".", (0..20).map(|i| entry(&format!("S{i}"), View::Ap)).collect());
        let spec = SplitSpec { trial_fraction: 0.0, ..Default::default() };
        let (train, trial) = stratified_split(&m, &spec).unwrap();
        assert_eq!(train.len(), 20);
        assert!(trial.is_empty());
    }

    #[test]
    fn constant_image_preprocesses_to_half() {
        let img = Image::filled(64, 64, 0.3);
        let out = preprocess(&img, &PreprocessSpec { target_size: (64, 64), ..Default::default() }).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bad_preprocess_spec_rejected() {
        let img = Image::filled(64, 64, 0.3);
        let spec = PreprocessSpec { denoise_kernel: 2, ..Default::default() };
        assert!(matches!(preprocess(&img, &spec), Err(CoreError::Spec(_))));
    }
}
