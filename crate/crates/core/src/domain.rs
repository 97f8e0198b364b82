//! Shared vocabulary: scans, annotations, findings, and their validation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::image::Image;

pub const MIN_SCAN_SIDE: usize = 64;
pub const NUM_GRADES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "18-40")]
    A18To40,
    #[serde(rename = "40-60")]
    A40To60,
    #[serde(rename = "60-75")]
    A60To75,
    #[serde(rename = "75+")]
    A75Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Manufacturer {
    #[serde(rename = "GE Healthcare")]
    GeHealthcare,
    Siemens,
    Philips,
    Others,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "AP")]
    Ap,
    Lateral,
    Unknown,
}

/// Closed enumerations with stable table order and wire labels.
pub trait Category: Sized + Copy + 'static {
    const ALL: &'static [Self];
    fn label(self) -> &'static str;

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.label() == s)
    }
}

impl Category for AgeGroup {
    const ALL: &'static [Self] = &[AgeGroup::A18To40, AgeGroup::A40To60, AgeGroup::A60To75, AgeGroup::A75Plus];
    fn label(self) -> &'static str {
        match self {
            AgeGroup::A18To40 => "18-40",
            AgeGroup::A40To60 => "40-60",
            AgeGroup::A60To75 => "60-75",
            AgeGroup::A75Plus => "75+",
        }
    }
}

impl Category for Gender {
    const ALL: &'static [Self] = &[Gender::Male, Gender::Female];
    fn label(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
        }
    }
}

impl Category for Manufacturer {
    const ALL: &'static [Self] = &[Manufacturer::GeHealthcare, Manufacturer::Siemens, Manufacturer::Philips, Manufacturer::Others];
    fn label(self) -> &'static str {
        match self {
            Manufacturer::GeHealthcare => "GE Healthcare",
            Manufacturer::Siemens => "Siemens",
            Manufacturer::Philips => "Philips",
            Manufacturer::Others => "Others",
        }
    }
}

impl Category for View {
    const ALL: &'static [Self] = &[View::Ap, View::Lateral, View::Unknown];
    fn label(self) -> &'static str {
        match self {
            View::Ap => "AP",
            View::Lateral => "Lateral",
            View::Unknown => "Unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanMeta {
    pub age_group: AgeGroup,
    pub gender: Gender,
    pub manufacturer: Manufacturer,
    pub view: View,
}

/// Wire form of [`ScanMeta`] before enumeration checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawMeta {
    pub age_group: String,
    pub gender: String,
    pub manufacturer: String,
    pub view: String,
}

/// One broken rule, e.g. `meta.age_group: not in enumeration`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

impl RawMeta {
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &str| {
            if !ok {
                v.push(Violation::new(format!("meta.{field}"), "not in enumeration"));
            }
        };
        check(AgeGroup::parse(&self.age_group).is_some(), "age_group");
        check(Gender::parse(&self.gender).is_some(), "gender");
        check(Manufacturer::parse(&self.manufacturer).is_some(), "manufacturer");
        check(View::parse(&self.view).is_some(), "view");
        v
    }

    pub fn to_meta(&self) -> Result<ScanMeta, Vec<Violation>> {
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(violations);
        }
        Ok(ScanMeta {
            age_group: AgeGroup::parse(&self.age_group).unwrap(),
            gender: Gender::parse(&self.gender).unwrap(),
            manufacturer: Manufacturer::parse(&self.manufacturer).unwrap(),
            view: View::parse(&self.view).unwrap(),
        })
    }
}

impl From<ScanMeta> for RawMeta {
    fn from(m: ScanMeta) -> Self {
        RawMeta {
            age_group: m.age_group.label().into(),
            gender: m.gender.label().into(),
            manufacturer: m.manufacturer.label().into(),
            view: m.view.label().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub id: String,
    pub image: Image,
    pub meta: ScanMeta,
}

/// Checks id, raster size, and pixel values. Never fails; reports.
pub fn validate_scan(scan: &Scan) -> Vec<Violation> {
    let mut v = Vec::new();
    if scan.id.trim().is_empty() {
        v.push(Violation::new("id", "must be non-empty"));
    }
    let img = &scan.image;
    if img.height() < MIN_SCAN_SIDE || img.width() < MIN_SCAN_SIDE {
        v.push(Violation::new("image", format!("size {}x{} below {MIN_SCAN_SIDE}x{MIN_SCAN_SIDE}", img.height(), img.width())));
    }
    if img.data().iter().any(|p| !p.is_finite()) {
        v.push(Violation::new("image", "non-finite value"));
    } else if img.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        v.push(Violation::new("image", "intensity outside [0,1]"));
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoundingBox { x_min, y_min, x_max, y_max }
    }

    pub fn from_points(points: &[(f64, f64)]) -> Self {
        let mut b = BoundingBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        b
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn validate(&self, field: &str) -> Vec<Violation> {
        let mut v = Vec::new();
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            v.push(Violation::new(field, "non-finite coordinate"));
            return v;
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            v.push(Violation::new(field, "min must be below max"));
        }
        if coords.iter().any(|&c| c < 0.0) {
            v.push(Violation::new(field, "negative coordinate"));
        }
        v
    }

    /// Clips to `[0, w] × [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        BoundingBox::new(self.x_min.clamp(0.0, w), self.y_min.clamp(0.0, h), self.x_max.clamp(0.0, w), self.y_max.clamp(0.0, h))
    }
}

/// Binary raster. Serialized as run lengths, alternating 0-runs and 1-runs
/// starting with a (possibly empty) 0-run, in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Mask { height: self.height, width: self.width, bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect() }
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b.map(|(x0, y0, x1, y1)| BoundingBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }

    fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut n = 0u32;
        for &b in &self.bits {
            if b != cur {
                runs.push(n);
                cur = b;
                n = 0;
            }
            n += 1;
        }
        runs.push(n);
        runs
    }

    fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self, String> {
        let mut bits = Vec::with_capacity(height * width);
        let mut cur = false;
        for &r in runs {
            bits.extend(std::iter::repeat(cur).take(r as usize));
            cur = !cur;
        }
        if bits.len() != height * width {
            return Err(format!("mask runs cover {} pixels, expected {}", bits.len(), height * width));
        }
        Ok(Mask { height, width, bits })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskWire {
    height: usize,
    width: usize,
    rle: Vec<u32>,
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MaskWire { height: self.height, width: self.width, rle: self.to_rle() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = MaskWire::deserialize(d)?;
        Mask::from_rle(w.height, w.width, &w.rle).map_err(serde::de::Error::custom)
    }
}

pub type Point = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub tibial_plateau_left: Point,
    pub tibial_plateau_right: Point,
    pub femoral_condyle_left: Point,
    pub femoral_condyle_right: Point,
}

impl KeypointSet {
    /// Points in a fixed order: condyle left/right, plateau left/right.
    pub fn to_array(&self) -> [Point; 4] {
        [self.femoral_condyle_left, self.femoral_condyle_right, self.tibial_plateau_left, self.tibial_plateau_right]
    }

    pub fn from_array(p: [Point; 4]) -> Self {
        KeypointSet { femoral_condyle_left: p[0], femoral_condyle_right: p[1], tibial_plateau_left: p[2], tibial_plateau_right: p[3] }
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self::from_array(self.to_array().map(f))
    }

    pub fn validate(&self, width: usize, height: usize) -> Vec<Violation> {
        let mut v = Vec::new();
        let names = ["femoral_condyle_left", "femoral_condyle_right", "tibial_plateau_left", "tibial_plateau_right"];
        for (name, (x, y)) in names.iter().zip(self.to_array()) {
            if !(x >= 0.0 && y >= 0.0 && x <= width as f64 && y <= height as f64) {
                v.push(Violation::new(format!("keypoints.{name}"), "outside image bounds"));
            }
        }
        if self.femoral_condyle_left.0 >= self.femoral_condyle_right.0 {
            v.push(Violation::new("keypoints.femoral_condyle", "left.x must be below right.x"));
        }
        if self.tibial_plateau_left.0 >= self.tibial_plateau_right.0 {
            v.push(Violation::new("keypoints.tibial_plateau", "left.x must be below right.x"));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpaceWidths {
    pub medial: f64,
    pub lateral: f64,
}

impl JointSpaceWidths {
    pub fn min(&self) -> f64 {
        self.medial.min(self.lateral)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub keypoints: KeypointSet,
    pub varus_valgus_angle: f64,
    pub misaligned: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_space_widths: Option<JointSpaceWidths>,
    #[serde(default)]
    pub sclerosis_boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub osteophyte_boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub implant_masks: Vec<Mask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Alignment>,
    #[serde(default)]
    pub soft_tissue_masks: Vec<Mask>,
    #[serde(default)]
    pub tibial_spike_boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oa_grade: Option<u8>,
}

impl AnnotationSet {
    pub fn validate(&self, width: usize, height: usize) -> Vec<Violation> {
        let mut v = Vec::new();
        if let Some(js) = self.joint_space_widths {
            if !(js.medial > 0.0 && js.lateral > 0.0) {
                v.push(Violation::new("joint_space_widths", "widths must be > 0"));
            }
        }
        for (name, boxes) in [("sclerosis_boxes", &self.sclerosis_boxes), ("osteophyte_boxes", &self.osteophyte_boxes), ("tibial_spike_boxes", &self.tibial_spike_boxes)] {
            for (i, b) in boxes.iter().enumerate() {
                v.extend(b.validate(&format!("{name}[{i}]")));
            }
        }
        for (name, masks) in [("implant_masks", &self.implant_masks), ("soft_tissue_masks", &self.soft_tissue_masks)] {
            for (i, m) in masks.iter().enumerate() {
                if (m.width(), m.height()) != (width, height) {
                    v.push(Violation::new(format!("{name}[{i}]"), "shape differs from image"));
                }
            }
        }
        if let Some(a) = &self.alignment {
            if !(-45.0..=45.0).contains(&a.varus_valgus_angle) {
                v.push(Violation::new("alignment.varus_valgus_angle", "outside [-45, 45] degrees"));
            }
            v.extend(a.keypoints.validate(width, height));
        }
        if let Some(g) = self.oa_grade {
            if g as usize >= NUM_GRADES {
                v.push(Violation::new("oa_grade", "not in {0,1,2,3}"));
            }
        }
        v
    }
}

/// Identifiers for the seven pathology models plus OA grading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathologyId {
    JointSpace,
    Sclerosis,
    Osteophytes,
    Postop,
    Alignment,
    SoftTissue,
    TibialSpike,
    Grading,
}

impl PathologyId {
    pub const DETECTORS: [PathologyId; 7] = [
        PathologyId::JointSpace,
        PathologyId::Sclerosis,
        PathologyId::Osteophytes,
        PathologyId::Postop,
        PathologyId::Alignment,
        PathologyId::SoftTissue,
        PathologyId::TibialSpike,
    ];

    pub const ALL: [PathologyId; 8] = [
        PathologyId::JointSpace,
        PathologyId::Sclerosis,
        PathologyId::Osteophytes,
        PathologyId::Postop,
        PathologyId::Alignment,
        PathologyId::SoftTissue,
        PathologyId::TibialSpike,
        PathologyId::Grading,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PathologyId::JointSpace => "joint_space",
            PathologyId::Sclerosis => "sclerosis",
            PathologyId::Osteophytes => "osteophytes",
            PathologyId::Postop => "postop",
            PathologyId::Alignment => "alignment",
            PathologyId::SoftTissue => "soft_tissue",
            PathologyId::TibialSpike => "tibial_spike",
            PathologyId::Grading => "grading",
        }
    }

    /// Row label used by the per-pathology results table.
    pub fn table_label(self) -> &'static str {
        match self {
            PathologyId::JointSpace => "Reducing Joint Space",
            PathologyId::Sclerosis => "Sclerosis",
            PathologyId::Osteophytes => "Osteophytes",
            PathologyId::Postop => "Post-Operative Conditions",
            PathologyId::Alignment => "Alignment Issues in Bone",
            PathologyId::SoftTissue => "Soft Tissue Anomaly",
            PathologyId::TibialSpike => "Prominent Tibial Spike",
            PathologyId::Grading => "Grading of Osteoarthritis",
        }
    }

    /// Whether the annotation set carries ground truth for this target.
    pub fn annotated_in(self, a: &AnnotationSet) -> bool {
        match self {
            PathologyId::JointSpace => a.joint_space_widths.is_some(),
            PathologyId::Sclerosis => !a.sclerosis_boxes.is_empty(),
            PathologyId::Osteophytes => !a.osteophyte_boxes.is_empty(),
            PathologyId::Postop => !a.implant_masks.is_empty(),
            PathologyId::Alignment => a.alignment.is_some(),
            PathologyId::SoftTissue => !a.soft_tissue_masks.is_empty(),
            PathologyId::TibialSpike => !a.tibial_spike_boxes.is_empty(),
            PathologyId::Grading => a.oa_grade.is_some(),
        }
    }
}

impl fmt::Display for PathologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PathologyId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        PathologyId::ALL.iter().copied().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = PathologyId::ALL.iter().map(|p| p.as_str()).collect();
            format!("unknown pathology '{s}' (valid: {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStage {
    Modality,
    Anatomy,
    View,
    Rotation,
}

impl GateStage {
    pub fn as_str(self) -> &'static str {
        match self {
            GateStage::Modality => "modality",
            GateStage::Anatomy => "anatomy",
            GateStage::View => "view",
            GateStage::Rotation => "rotation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub decision: Decision,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewOutcome {
    pub view: View,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_xray: Option<StageOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_knee: Option<StageOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<ViewOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_applied: Option<f64>,
    #[serde(default)]
    pub rejected_at: Option<GateStage>,
}

impl GateResult {
    pub fn accepted(&self) -> bool {
        self.rejected_at.is_none()
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let conf = [self.is_xray.map(|s| s.confidence), self.is_knee.map(|s| s.confidence), self.view.map(|s| s.confidence)];
        if conf.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            v.push(Violation::new("gate", "confidence outside [0,1]"));
        }
        let later_present = match self.rejected_at {
            None => false,
            Some(GateStage::Modality) => self.is_knee.is_some() || self.view.is_some() || self.rotation_applied.is_some(),
            Some(GateStage::Anatomy) => self.view.is_some() || self.rotation_applied.is_some(),
            Some(GateStage::View) | Some(GateStage::Rotation) => self.rotation_applied.is_some(),
        };
        if later_present {
            v.push(Violation::new("gate", "fields present after the rejecting stage"));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[serde(rename = "box")]
    Box(BoundingBox),
    Mask(Mask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub region: Region,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPrediction {
    pub angle: f64,
    pub misaligned_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingReport {
    pub scan_id: String,
    pub gate: GateResult,
    #[serde(default)]
    pub findings: BTreeMap<PathologyId, Vec<Finding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_space_pred: Option<JointSpaceWidths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_pred: Option<AlignmentPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade_probs: Option<[f64; NUM_GRADES]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    /// Per-member grade distributions behind `grade_probs`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grade_members: Vec<[f64; NUM_GRADES]>,
}

impl FindingReport {
    pub fn rejected(scan_id: String, gate: GateResult) -> Self {
        FindingReport {
            scan_id,
            gate,
            findings: BTreeMap::new(),
            joint_space_pred: None,
            alignment_pred: None,
            grade_probs: None,
            grade: None,
            grade_members: Vec::new(),
        }
    }
}

/// Index of the maximum, ties resolved toward the lower index.
pub fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn validate_report(r: &FindingReport) -> Vec<Violation> {
    let mut v = r.gate.validate();
    for (p, fs) in &r.findings {
        if fs.iter().any(|f| !(0.0..=1.0).contains(&f.confidence)) {
            v.push(Violation::new(format!("findings.{p}"), "confidence outside [0,1]"));
        }
    }
    if let Some(a) = r.alignment_pred {
        if !(0.0..=1.0).contains(&a.misaligned_prob) {
            v.push(Violation::new("alignment_pred.misaligned_prob", "outside [0,1]"));
        }
    }
    match (r.grade_probs, r.grade) {
        (Some(p), Some(g)) => {
            if p.iter().any(|x| *x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                v.push(Violation::new("grade_probs", "not a probability vector"));
            }
            if argmax_low(&p) != g as usize {
                v.push(Violation::new("grade", "not the argmax of grade_probs"));
            }
        }
        (None, None) => {}
        _ => v.push(Violation::new("grade", "grade and grade_probs must appear together")),
    }
    if !r.gate.accepted() && (!r.findings.is_empty() || r.grade.is_some()) {
        v.push(Violation::new("findings", "present on a gate-rejected scan"));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan() -> Scan {
        Scan {
            id: "S1".into(),
            image: Image::filled(64, 64, 0.5),
            meta: ScanMeta { age_group: AgeGroup::A18To40, gender: Gender::Female, manufacturer: Manufacturer::Siemens, view: View::Ap },
        }
    }

    #[test]
    fn well_formed_scan_has_no_violations() {
        assert!(validate_scan(&scan()).is_empty());
    }

    #[test]
    fn nan_pixel_reported() {
        let mut s = scan();
        s.image.set(3, 4, f32::NAN);
        let v: Vec<String> = validate_scan(&s).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["image: non-finite value"]);
    }

    #[test]
    fn unknown_age_group_reported() {
        let mut raw = RawMeta::from(scan().meta);
        raw.age_group = "90+".into();
        let v: Vec<String> = raw.validate().iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["meta.age_group: not in enumeration"]);
        // The four accepted labels are exactly the age-table categories.
        for label in ["18-40", "40-60", "60-75", "75+"] {
            raw.age_group = label.into();
            assert!(raw.validate().is_empty());
        }
    }

    #[test]
    fn small_and_empty_id_reported() {
        let s = Scan { id: "".into(), image: Image::filled(32, 80, 0.1), meta: scan().meta };
        assert_eq!(validate_scan(&s).len(), 2);
    }

    #[test]
    fn meta_serializes_with_table_labels() {
        let json = serde_json::to_string(&scan().meta).unwrap();
        assert_eq!(json, r#"{"age_group":"18-40","gender":"Female","manufacturer":"Siemens","view":"AP"}"#);
    }

    #[test]
    fn mask_rle_round_trip() {
        let m = Mask::from_fn(5, 7, |x, y| (x + y) % 3 == 0);
        let json = serde_json::to_string(&m).unwrap();
        let back: Mask = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        let bad = r#"{"height":2,"width":2,"rle":[1,1]}"#;
        assert!(serde_json::from_str::<Mask>(bad).is_err());
    }

    #[test]
    fn gate_invariant() {
        let mut g = GateResult { rejected_at: Some(GateStage::Modality), ..Default::default() };
        assert!(g.validate().is_empty());
        g.view = Some(ViewOutcome { view: View::Ap, confidence: 0.9 });
        assert_eq!(g.validate().len(), 1);
    }

    #[test]
    fn report_grade_must_be_argmax() {
        let mut r = FindingReport::rejected("S".into(), GateResult::default());
        r.grade_probs = Some([0.1, 0.6, 0.2, 0.1]);
        r.grade = Some(1);
        assert!(validate_report(&r).is_empty());
        r.grade = Some(2);
        assert_eq!(validate_report(&r).len(), 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_low(&[0.25; 4]), 0);
        assert_eq!(argmax_low(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn pathology_ids_parse() {
        assert_eq!("tibial_spike".parse::<PathologyId>().unwrap(), PathologyId::TibialSpike);
        let err = "knee".parse::<PathologyId>().unwrap_err();
        assert!(err.contains("joint_space"));
    }
}
