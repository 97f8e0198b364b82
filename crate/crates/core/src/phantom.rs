//! Synthetic knee phantoms with exact ground truth.
//!
//! Layout in the unrotated phantom frame, with `s = min(H, W) / 256`:
//! femur block above the joint line, tibia block below, a stepped gap whose
//! left half is the medial compartment and right half the lateral one.
//! Keypoints sit at the block corners that face the gap.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::domain::*;
use crate::error::{CoreError, Result};
use crate::image::{rotate_point, save_image, Image};
use crate::ingest::{write_annotations, DatasetManifest, ManifestEntry, ManifestHeader};

const BG: f32 = 0.05;
const LEG: f32 = 0.25;
pub const BONE: f32 = 0.6;
const SOFT: f32 = 0.4;
const IMPLANT: f32 = 1.0;

/// Monotone grade rule: grade = number of cut-points strictly above the
/// minimum joint-space width. Cut-points are descending pixel widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeRule {
    pub cutpoints: [f64; 3],
}

impl Default for GradeRule {
    fn default() -> Self {
        GradeRule { cutpoints: [16.0, 11.0, 6.0] }
    }
}

impl GradeRule {
    pub fn grade(&self, min_width: f64) -> u8 {
        self.cutpoints.iter().filter(|&&c| min_width < c).count() as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SclerosisSpec {
    pub count: usize,
    pub density_boost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsteophyteSpec {
    pub count: usize,
    pub size_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftTissueSpec {
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: (usize, usize),
    pub joint_space: JointSpaceWidths,
    pub sclerosis: SclerosisSpec,
    pub osteophytes: OsteophyteSpec,
    pub implants: bool,
    pub alignment_angle: f64,
    pub soft_tissue: SoftTissueSpec,
    pub tibial_spike_height: f64,
    pub oa_grade: u8,
    pub noise_sigma: f64,
    pub rotation: f64,
    #[serde(default)]
    pub grade_rule: GradeRule,
    /// `|alignment_angle|` at or above this marks the scan misaligned.
    #[serde(default = "default_misalignment")]
    pub misalignment_threshold: f64,
}

fn default_misalignment() -> f64 {
    5.0
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let mut spec = PhantomSpec {
            image_size: (256, 256),
            joint_space: JointSpaceWidths { medial: 18.0, lateral: 18.0 },
            sclerosis: SclerosisSpec { count: 0, density_boost: 0.5 },
            osteophytes: OsteophyteSpec { count: 0, size_range: (10.0, 20.0) },
            implants: false,
            alignment_angle: 0.0,
            soft_tissue: SoftTissueSpec { count: 0 },
            tibial_spike_height: 0.0,
            oa_grade: 0,
            noise_sigma: 0.0,
            rotation: 0.0,
            grade_rule: GradeRule::default(),
            misalignment_threshold: default_misalignment(),
        };
        spec.oa_grade = spec.rule_grade();
        spec
    }
}

/// Sites: femur-medial, femur-lateral, tibia-medial, tibia-lateral.
const SITES: usize = 4;

impl PhantomSpec {
    pub fn scale(&self) -> f64 {
        self.image_size.0.min(self.image_size.1) as f64 / 256.0
    }

    pub fn rule_grade(&self) -> u8 {
        self.grade_rule.grade(self.joint_space.min())
    }

    /// Sets the joint space and the matching grade.
    pub fn with_joint_space(mut self, medial: f64, lateral: f64) -> Self {
        self.joint_space = JointSpaceWidths { medial, lateral };
        self.oa_grade = self.rule_grade();
        self
    }

    fn spike_limit(&self) -> f64 {
        let s = self.scale();
        // The spike tip has to stay below the notch roof with 1s of clearance.
        self.joint_space.min() / 2.0 + self.joint_space.medial.max(self.joint_space.lateral) / 2.0 + NOTCH_DEPTH * s - s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Spec(m));
        let (h, w) = self.image_size;
        let s = self.scale();
        if h < MIN_SCAN_SIDE || w < MIN_SCAN_SIDE {
            return err(format!("image_size {h}x{w} below {MIN_SCAN_SIDE}x{MIN_SCAN_SIDE}"));
        }
        let JointSpaceWidths { medial, lateral } = self.joint_space;
        if !(medial > 0.0 && lateral > 0.0) {
            return err("joint_space widths must be > 0".into());
        }
        if medial.max(lateral) / 2.0 > BLOCK_DEPTH * s - 5.0 * s {
            return err(format!("joint_space {:.1} does not fit the {h}x{w} image", medial.max(lateral)));
        }
        if self.sclerosis.count > SITES || self.osteophytes.count > SITES || self.soft_tissue.count > SITES {
            return err(format!("at most {SITES} sclerosis, osteophyte and soft-tissue sites"));
        }
        if self.sclerosis.count > 0 && !(self.sclerosis.density_boost > 0.0 && self.sclerosis.density_boost <= 1.0) {
            return err("sclerosis density_boost must lie in (0, 1]".into());
        }
        let (lo, hi) = self.osteophytes.size_range;
        if self.osteophytes.count > 0 && !(lo > 0.0 && lo <= hi && hi <= 24.0 * s) {
            return err(format!("osteophyte size range ({lo}, {hi}) must satisfy 0 < lo <= hi <= {}", 24.0 * s));
        }
        if !(-45.0..=45.0).contains(&self.alignment_angle) {
            return err("alignment_angle outside [-45, 45]".into());
        }
        if !(-30.0..=30.0).contains(&self.rotation) {
            return err("rotation outside [-30, 30]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return err("noise_sigma must be >= 0".into());
        }
        if !(self.tibial_spike_height >= 0.0) || self.tibial_spike_height >= self.spike_limit() {
            return err(format!("tibial_spike_height {} would pierce the femoral notch", self.tibial_spike_height));
        }
        if self.oa_grade != self.rule_grade() {
            return err(format!("oa_grade {} inconsistent with joint space (rule gives {})", self.oa_grade, self.rule_grade()));
        }
        Ok(())
    }
}

const BLOCK_HALF: f64 = 72.0;
const BLOCK_DEPTH: f64 = 60.0;
const FEMUR_SHAFT_HALF: f64 = 30.0;
const TIBIA_SHAFT_HALF: f64 = 26.0;
const NOTCH_HALF: f64 = 16.0;
const NOTCH_DEPTH: f64 = 16.0;
const LEG_HALF: f64 = 110.0;
const SPIKE_OFFSET: f64 = 8.0;
const SPIKE_HALF_BASE: f64 = 6.0;

#[derive(Debug, Clone)]
enum Shape {
    /// Convex polygon, vertices in either winding.
    Poly(Vec<(f64, f64)>),
    Ellipse { cx: f64, cy: f64, a: f64, b: f64 },
}

impl Shape {
    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Shape {
        Shape::Poly(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Poly(v) => {
                let b = BoundingBox::from_points(v);
                (b.x_min, b.y_min, b.x_max, b.y_max)
            }
            Shape::Ellipse { cx, cy, a, b } => (cx - a, cy - b, cx + a, cy + b),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Poly(v) => {
                let n = v.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % n];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
            Shape::Ellipse { cx, cy, a, b } => {
                let dx = (x - cx) / a;
                let dy = (y - cy) / b;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Tight box of the shape after the image-coordinate rotation `phi`.
    fn rotated_box(&self, phi: f64, w: usize, h: usize) -> BoundingBox {
        match self {
            Shape::Poly(v) => BoundingBox::from_points(&v.iter().map(|&p| rotate_point(p, phi, w, h)).collect::<Vec<_>>()),
            Shape::Ellipse { cx, cy, a, b } => {
                let (s, c) = phi.to_radians().sin_cos();
                let (ex, ey) = rotate_point((*cx, *cy), phi, w, h);
                let hw = (a * a * c * c + b * b * s * s).sqrt();
                let hh = (a * a * s * s + b * b * c * c).sqrt();
                BoundingBox::new(ex - hw, ey - hh, ex + hw, ey + hh)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PartKind {
    Bone,
    Sclerosis,
    Osteophyte,
    Spike,
    SoftTissue,
    Implant,
    Other,
}

#[derive(Debug, Clone)]
struct Part {
    kind: PartKind,
    intensity: f32,
    shapes: Vec<Shape>,
    holes: Vec<Shape>,
    bounds: (f64, f64, f64, f64),
}

impl Part {
    fn new(kind: PartKind, intensity: f32, shapes: Vec<Shape>) -> Self {
        let bounds = shapes.iter().map(Shape::bounds).fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |a, b| {
            (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3))
        });
        Part { kind, intensity, shapes, holes: Vec::new(), bounds }
    }

    fn with_holes(mut self, holes: Vec<Shape>) -> Self {
        self.holes = holes;
        self
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.bounds;
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return false;
        }
        self.shapes.iter().any(|s| s.contains(x, y)) && !self.holes.iter().any(|s| s.contains(x, y))
    }
}

/// A drawable scene: a leg band over background, then parts in priority order.
struct Scene {
    width: usize,
    height: usize,
    leg: Option<(f64, f64)>,
    parts: Vec<Part>,
}

const OUT_OF_FRAME: i32 = -3;
const BACKGROUND: i32 = -2;
const LEG_ID: i32 = -1;

impl Scene {
    fn top(&self, x: f64, y: f64) -> i32 {
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return OUT_OF_FRAME;
        }
        for (i, p) in self.parts.iter().enumerate().rev() {
            if p.contains(x, y) {
                return i as i32;
            }
        }
        match self.leg {
            Some((x0, x1)) if x >= x0 && x <= x1 => LEG_ID,
            _ => BACKGROUND,
        }
    }

    fn value(&self, id: i32) -> f32 {
        match id {
            OUT_OF_FRAME => 0.0,
            BACKGROUND => BG,
            LEG_ID => LEG,
            i => self.parts[i as usize].intensity,
        }
    }

    /// Renders with the content turned by `phi` (image-coordinate degrees).
    /// Pixels whose corners and center agree are shaded once; others get a
    /// 4×4 supersample.
    fn render(&self, phi: f64) -> (Image, Vec<i32>) {
        let (w, h) = (self.width, self.height);
        let (s, c) = (-phi).to_radians().sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let src = |qx: f64, qy: f64| {
            let dx = qx - cx;
            let dy = qy - cy;
            (c * dx - s * dy + cx, s * dx + c * dy + cy)
        };
        let top_at = |qx: f64, qy: f64| {
            let (px, py) = src(qx, qy);
            self.top(px, py)
        };
        let mut img = Image::filled(h, w, 0.0);
        let mut ids = vec![0i32; w * h];
        // Corner ids are shared by neighbouring pixels.
        let mut corners_prev: Vec<i32> = (0..=w).map(|x| top_at(x as f64, 0.0)).collect();
        let mut corners_next = vec![0i32; w + 1];
        for y in 0..h {
            for (x, slot) in corners_next.iter_mut().enumerate() {
                *slot = top_at(x as f64, (y + 1) as f64);
            }
            for x in 0..w {
                let center = top_at(x as f64 + 0.5, y as f64 + 0.5);
                ids[y * w + x] = center;
                let uniform = [corners_prev[x], corners_prev[x + 1], corners_next[x], corners_next[x + 1]].iter().all(|&k| k == center);
                let v = if uniform {
                    self.value(center)
                } else {
                    let mut acc = 0.0f32;
                    for j in 0..4 {
                        for i in 0..4 {
                            acc += self.value(top_at(x as f64 + (i as f64 + 0.5) / 4.0, y as f64 + (j as f64 + 0.5) / 4.0));
                        }
                    }
                    acc / 16.0
                };
                img.set(x, y, v);
            }
            std::mem::swap(&mut corners_prev, &mut corners_next);
        }
        (img, ids)
    }
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).unwrap();
        for v in img.data_mut() {
            *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    } else {
        for v in img.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn shaft(pivot: (f64, f64), dir: (f64, f64), half: f64, back: f64, len: f64) -> Shape {
    let n = (-dir.1, dir.0);
    let a = (pivot.0 - dir.0 * back, pivot.1 - dir.1 * back);
    let b = (pivot.0 + dir.0 * len, pivot.1 + dir.1 * len);
    Shape::Poly(vec![
        (a.0 + n.0 * half, a.1 + n.1 * half),
        (b.0 + n.0 * half, b.1 + n.1 * half),
        (b.0 - n.0 * half, b.1 - n.1 * half),
        (a.0 - n.0 * half, a.1 - n.1 * half),
    ])
}

fn turn(v: (f64, f64), degrees: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    (c * v.0 - s * v.1, s * v.0 + c * v.1)
}

/// Geometry of the knee in the unrotated frame.
struct KneeLayout {
    s: f64,
    cx: f64,
    jy: f64,
    femur_edge: [f64; 2],
    tibia_edge: [f64; 2],
}

impl KneeLayout {
    fn new(spec: &PhantomSpec) -> Self {
        let (h, w) = spec.image_size;
        let s = spec.scale();
        let (cx, jy) = (w as f64 / 2.0, h as f64 / 2.0);
        let JointSpaceWidths { medial, lateral } = spec.joint_space;
        KneeLayout { s, cx, jy, femur_edge: [jy - medial / 2.0, jy - lateral / 2.0], tibia_edge: [jy + medial / 2.0, jy + lateral / 2.0] }
    }

    fn block_x(&self, side: usize) -> (f64, f64) {
        let b = BLOCK_HALF * self.s;
        if side == 0 { (self.cx - b, self.cx) } else { (self.cx, self.cx + b) }
    }

    fn outer_x(&self, side: usize) -> f64 {
        let b = BLOCK_HALF * self.s;
        if side == 0 { self.cx - b } else { self.cx + b }
    }

    fn keypoints(&self) -> KeypointSet {
        KeypointSet {
            femoral_condyle_left: (self.outer_x(0), self.femur_edge[0]),
            femoral_condyle_right: (self.outer_x(1), self.femur_edge[1]),
            tibial_plateau_left: (self.outer_x(0), self.tibia_edge[0]),
            tibial_plateau_right: (self.outer_x(1), self.tibia_edge[1]),
        }
    }

    fn measurement_x(&self) -> [f64; 2] {
        let b = BLOCK_HALF * self.s;
        [self.cx - b / 2.0, self.cx + b / 2.0]
    }
}

/// Columns (x in the unrotated frame) along which the medial and lateral
/// widths are measured.
pub fn measurement_lines(spec: &PhantomSpec) -> [f64; 2] {
    KneeLayout::new(spec).measurement_x()
}

fn bone_parts(spec: &PhantomSpec, k: &KneeLayout) -> Vec<Part> {
    let s = k.s;
    let d = BLOCK_DEPTH * s;
    let far = 400.0 * s;
    let mut femur = vec![];
    let mut tibia = vec![];
    for side in 0..2 {
        let (x0, x1) = k.block_x(side);
        femur.push(Shape::rect(x0, k.jy - d, x1, k.femur_edge[side]));
        tibia.push(Shape::rect(x0, k.tibia_edge[side], x1, k.jy + d));
    }
    let half_a = spec.alignment_angle / 2.0;
    femur.push(shaft((k.cx, k.jy - d), turn((0.0, -1.0), -half_a), FEMUR_SHAFT_HALF * s, 20.0 * s, far));
    tibia.push(shaft((k.cx, k.jy + d), turn((0.0, 1.0), half_a), TIBIA_SHAFT_HALF * s, 20.0 * s, far));
    let roof = k.jy - spec.joint_space.medial.max(spec.joint_space.lateral) / 2.0 - NOTCH_DEPTH * s;
    let notch = Shape::rect(k.cx - NOTCH_HALF * s, roof, k.cx + NOTCH_HALF * s, k.jy);
    vec![Part::new(PartKind::Bone, BONE, femur).with_holes(vec![notch]), Part::new(PartKind::Bone, BONE, tibia)]
}

fn pick_sites(rng: &mut ChaCha8Rng, count: usize) -> Vec<usize> {
    let mut sites: Vec<usize> = (0..SITES).collect();
    sites.shuffle(rng);
    let mut chosen: Vec<usize> = sites[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Draws one phantom. Deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64, id: &str, meta: ScanMeta) -> Result<(Scan, AnnotationSet)> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let k = KneeLayout::new(spec);
    let s = k.s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = -spec.rotation;

    let mut parts = bone_parts(spec, &k);
    let mut ann = AnnotationSet { joint_space_widths: Some(spec.joint_space), oa_grade: Some(spec.oa_grade), ..Default::default() };

    for site in pick_sites(&mut rng, spec.sclerosis.count) {
        let side = site % 2;
        let a = rng.gen_range(14.0..=20.0) * s;
        let b = rng.gen_range(5.0..=8.0) * s;
        let x = k.measurement_x()[side];
        let y = if site < 2 { k.femur_edge[side] - b - 2.0 * s } else { k.tibia_edge[side] + b + 2.0 * s };
        let e = Shape::Ellipse { cx: x, cy: y, a, b };
        ann.sclerosis_boxes.push(e.rotated_box(phi, w, h));
        parts.push(Part::new(PartKind::Sclerosis, BONE + 0.3 * spec.sclerosis.density_boost as f32, vec![e]));
    }

    let (lo, hi) = spec.osteophytes.size_range;
    for site in pick_sites(&mut rng, spec.osteophytes.count) {
        let side = site % 2;
        let size = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let x0 = k.outer_x(side);
        let out = if side == 0 { -size } else { size };
        let tri = if site < 2 {
            let y = k.femur_edge[side];
            Shape::Poly(vec![(x0, y), (x0, y - size), (x0 + out, y)])
        } else {
            let y = k.tibia_edge[side];
            Shape::Poly(vec![(x0, y), (x0, y + size), (x0 + out, y)])
        };
        ann.osteophyte_boxes.push(tri.rotated_box(phi, w, h));
        parts.push(Part::new(PartKind::Osteophyte, BONE, vec![tri]));
    }

    if spec.tibial_spike_height > 0.0 {
        let sh = spec.tibial_spike_height;
        for side in 0..2 {
            let sx = if side == 0 { k.cx - SPIKE_OFFSET * s } else { k.cx + SPIKE_OFFSET * s };
            let base = k.tibia_edge[side];
            let hb = SPIKE_HALF_BASE * s;
            let tri = Shape::Poly(vec![(sx - hb, base), (sx, base - sh), (sx + hb, base)]);
            ann.tibial_spike_boxes.push(tri.rotated_box(phi, w, h));
            parts.push(Part::new(PartKind::Spike, BONE, vec![tri]));
        }
    }

    for site in pick_sites(&mut rng, spec.soft_tissue.count) {
        let side = site % 2;
        let a = rng.gen_range(5.0..=9.0) * s;
        let b = rng.gen_range(10.0..=14.0) * s;
        let x = if side == 0 { k.cx - 96.0 * s } else { k.cx + 96.0 * s };
        let y = if site < 2 { k.jy - 45.0 * s } else { k.jy + 45.0 * s };
        parts.push(Part::new(PartKind::SoftTissue, SOFT, vec![Shape::Ellipse { cx: x, cy: y, a, b }]));
    }

    if spec.implants {
        let dir = turn((0.0, 1.0), spec.alignment_angle / 2.0);
        let n = (-dir.1, dir.0);
        let origin = (k.cx, k.jy + BLOCK_DEPTH * s);
        let at = |u: f64, v: f64| (origin.0 + n.0 * u + dir.0 * v, origin.1 + n.1 * u + dir.1 * v);
        let quad = |u0: f64, v0: f64, u1: f64, v1: f64| Shape::Poly(vec![at(u0, v0), at(u1, v0), at(u1, v1), at(u0, v1)]);
        let mut shapes = vec![quad(-26.0 * s, -20.0 * s, -18.0 * s, 60.0 * s)];
        for v in [-8.0, 18.0, 44.0] {
            shapes.push(quad(-26.0 * s, v * s, 10.0 * s, (v + 3.0) * s));
        }
        parts.push(Part::new(PartKind::Implant, IMPLANT, shapes));
    }

    let scene = Scene { width: w, height: h, leg: Some((k.cx - LEG_HALF * s, k.cx + LEG_HALF * s)), parts };
    let (mut image, ids) = scene.render(phi);

    let mask_for = |pred: &dyn Fn(usize) -> bool| Mask::from_fn(h, w, |x, y| {
        let id = ids[y * w + x];
        id >= 0 && pred(id as usize)
    });
    for (i, p) in scene.parts.iter().enumerate() {
        if p.kind == PartKind::SoftTissue {
            ann.soft_tissue_masks.push(mask_for(&|id| id == i));
        }
    }
    if spec.implants {
        ann.implant_masks.push(mask_for(&|id| scene.parts[id].kind == PartKind::Implant));
    }

    let keypoints = k.keypoints().map(|p| rotate_point(p, phi, w, h));
    ann.alignment = Some(Alignment {
        keypoints,
        varus_valgus_angle: spec.alignment_angle,
        misaligned: spec.alignment_angle.abs() >= spec.misalignment_threshold,
    });

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    add_noise(&mut image, spec.noise_sigma, &mut noise_rng);
    Ok((Scan { id: id.to_string(), image, meta }, ann))
}

/// Non-knee and off-view images used to train and probe the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorKind {
    /// Side-view knee: offset narrow femur, patella, tibial tuberosity.
    Lateral,
    /// One long bone with a rounded end, no joint.
    SingleBone,
    /// Torso with lung fields, ribs and spine.
    Chest,
    /// Independent uniform noise.
    UniformNoise,
    /// Smooth random texture with no bone structure.
    Texture,
}

/// Draws a distractor image of size `size × size`.
pub fn generate_distractor(kind: DistractorKind, size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64 / 256.0;
    let c = size as f64 / 2.0;
    let rotation = rng.gen_range(-20.0..=20.0);
    let noise = rng.gen_range(0.01..=0.03);
    let mut parts = Vec::new();
    let mut leg = Some((c - LEG_HALF * s, c + LEG_HALF * s));
    match kind {
        DistractorKind::Lateral => {
            let gap = rng.gen_range(6.0..=18.0) * s;
            let off = rng.gen_range(8.0..=16.0) * s;
            let fx = c - off;
            // Rounded condyle on a narrow femoral shaft.
            parts.push(Part::new(
                PartKind::Bone,
                BONE,
                vec![
                    Shape::rect(fx - 30.0 * s, -10.0, fx + 30.0 * s, c - gap / 2.0 - 30.0 * s),
                    Shape::Ellipse { cx: fx + 6.0 * s, cy: c - gap / 2.0 - 30.0 * s, a: 42.0 * s, b: 30.0 * s },
                ],
            ));
            parts.push(Part::new(PartKind::Other, 0.55, vec![Shape::Ellipse { cx: fx + 64.0 * s, cy: c - 34.0 * s, a: 11.0 * s, b: 22.0 * s }]));
            let tx = c + off / 2.0;
            parts.push(Part::new(
                PartKind::Bone,
                BONE,
                vec![
                    Shape::rect(tx - 40.0 * s, c + gap / 2.0, tx + 34.0 * s, c + gap / 2.0 + 40.0 * s),
                    Shape::rect(tx - 26.0 * s, c + gap / 2.0 + 30.0 * s, tx + 22.0 * s, size as f64 + 10.0),
                    Shape::Poly(vec![(tx + 34.0 * s, c + gap / 2.0 + 20.0 * s), (tx + 44.0 * s, c + gap / 2.0 + 40.0 * s), (tx + 22.0 * s, c + gap / 2.0 + 60.0 * s), (tx + 22.0 * s, c + gap / 2.0 + 20.0 * s)]),
                ],
            ));
        }
        DistractorKind::SingleBone => {
            let half = rng.gen_range(18.0..=34.0) * s;
            let head_y = rng.gen_range(0.25..=0.75) * size as f64;
            let up = rng.gen_bool(0.5);
            let (y0, y1) = if up { (-10.0, head_y) } else { (head_y, size as f64 + 10.0) };
            parts.push(Part::new(
                PartKind::Bone,
                BONE,
                vec![Shape::rect(c - half, y0, c + half, y1), Shape::Ellipse { cx: c, cy: head_y, a: half * 1.6, b: half * 1.2 }],
            ));
            leg = Some((c - (half + 45.0 * s), c + (half + 45.0 * s)));
        }
        DistractorKind::Chest => {
            leg = Some((c - 118.0 * s, c + 118.0 * s));
            for side in [-1.0, 1.0] {
                parts.push(Part::new(PartKind::Other, 0.12, vec![Shape::Ellipse { cx: c + side * 55.0 * s, cy: c - 5.0 * s, a: 42.0 * s, b: 85.0 * s }]));
            }
            let gap = rng.gen_range(20.0..=26.0) * s;
            let mut ribs = Vec::new();
            let mut y = c - 95.0 * s;
            while y < c + 85.0 * s {
                for side in [-1.0, 1.0] {
                    let x0 = c + side * 8.0 * s;
                    let x1 = c + side * 100.0 * s;
                    ribs.push(Shape::Poly(vec![(x0, y), (x1, y + 14.0 * s), (x1, y + 19.0 * s), (x0, y + 5.0 * s)]));
                }
                y += gap;
            }
            parts.push(Part::new(PartKind::Other, 0.45, ribs));
            parts.push(Part::new(PartKind::Bone, BONE, vec![Shape::rect(c - 10.0 * s, -10.0, c + 10.0 * s, size as f64 + 10.0)]));
        }
        DistractorKind::UniformNoise => {
            let data = (0..size * size).map(|_| rng.gen::<f32>()).collect();
            return Image::from_vec(size, size, data);
        }
        DistractorKind::Texture => {
            let waves: Vec<(f64, f64, f64, f64)> = (0..6)
                .map(|_| (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0)))
                .collect();
            let mut img = Image::from_fn(size, size, |x, y| {
                let v: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * ((fx * x as f64 + fy * y as f64) / s + ph).sin()).sum();
                v as f32
            });
            let (lo, hi) = img.min_max();
            let span = (hi - lo).max(1e-6);
            img = img.map(|v| 0.1 + 0.8 * (v - lo) / span);
            add_noise(&mut img, noise, &mut rng);
            return img;
        }
    }
    let scene = Scene { width: size, height: size, leg, parts };
    let (mut img, _) = scene.render(-rotation);
    add_noise(&mut img, noise, &mut rng);
    img
}

/// Categorical weights, in table order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaDistribution {
    pub age_group: [f64; 4],
    pub gender: [f64; 2],
    pub manufacturer: [f64; 4],
    pub view: [f64; 3],
}

impl Default for MetaDistribution {
    fn default() -> Self {
        MetaDistribution {
            age_group: [542_124.0, 406_593.0, 271_062.0, 135_531.0],
            gender: [664_102.0, 691_209.0],
            manufacturer: [528_571.0, 406_593.0, 325_275.0, 94_872.0],
            view: [1.0, 0.0, 0.0],
        }
    }
}

fn draw<T: Category>(rng: &mut ChaCha8Rng, w: &[f64]) -> Result<T> {
    let idx = WeightedIndex::new(w).map_err(|e| CoreError::Spec(format!("bad category weights {w:?}: {e}")))?;
    Ok(T::ALL[idx.sample(rng)])
}

impl MetaDistribution {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<ScanMeta> {
        Ok(ScanMeta {
            age_group: draw(rng, &self.age_group)?,
            gender: draw(rng, &self.gender)?,
            manufacturer: draw(rng, &self.manufacturer)?,
            view: draw(rng, &self.view)?,
        })
    }
}

/// Distribution over phantom specs. Pixel quantities are given at 256 px and
/// scale with `image_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecDistribution {
    pub image_size: usize,
    pub grade_weights: [f64; 4],
    /// Minimum joint-space width range per grade.
    pub grade_width_ranges: [(f64, f64); 4],
    /// The wider compartment is `min + U(0, compartment_spread)`.
    pub compartment_spread: f64,
    pub grade_rule: GradeRule,
    pub sclerosis_prob: f64,
    pub max_sclerosis: usize,
    pub density_boost: (f64, f64),
    pub max_osteophytes: usize,
    pub osteophyte_size: (f64, f64),
    pub implant_prob: f64,
    pub soft_tissue_prob: f64,
    pub max_soft_tissue: usize,
    pub spike_prob: f64,
    pub spike_height: (f64, f64),
    pub alignment_range: (f64, f64),
    pub misalignment_threshold: f64,
    pub noise_sigma: (f64, f64),
    pub rotation_range: (f64, f64),
    pub meta: MetaDistribution,
}

impl Default for SpecDistribution {
    fn default() -> Self {
        SpecDistribution {
            image_size: 256,
            grade_weights: [1.0; 4],
            grade_width_ranges: [(17.0, 22.0), (12.0, 15.0), (7.5, 10.0), (3.0, 5.0)],
            compartment_spread: 5.0,
            grade_rule: GradeRule::default(),
            sclerosis_prob: 0.5,
            max_sclerosis: 2,
            density_boost: (0.5, 1.0),
            max_osteophytes: 4,
            osteophyte_size: (10.0, 20.0),
            implant_prob: 0.15,
            soft_tissue_prob: 0.3,
            max_soft_tissue: 2,
            spike_prob: 0.5,
            spike_height: (8.0, 16.0),
            alignment_range: (-12.0, 12.0),
            misalignment_threshold: 5.0,
            noise_sigma: (0.01, 0.03),
            rotation_range: (0.0, 0.0),
            meta: MetaDistribution::default(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo { rng.gen_range(lo..=hi) } else { lo }
}

impl SpecDistribution {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(PhantomSpec, ScanMeta)> {
        let s = self.image_size as f64 / 256.0;
        let grade = WeightedIndex::new(self.grade_weights).map_err(|e| CoreError::Spec(format!("grade_weights: {e}")))?.sample(rng);
        let min_w = uniform(rng, self.grade_width_ranges[grade]) * s;
        let other = min_w + uniform(rng, (0.0, self.compartment_spread)) * s;
        let (medial, lateral) = if rng.gen_bool(0.5) { (min_w, other) } else { (other, min_w) };
        let osteo_cap = self.max_osteophytes.min(grade + 1);
        let spec = PhantomSpec {
            image_size: (self.image_size, self.image_size),
            joint_space: JointSpaceWidths { medial, lateral },
            sclerosis: SclerosisSpec {
                count: if rng.gen_bool(self.sclerosis_prob) { rng.gen_range(1..=self.max_sclerosis.max(1)) } else { 0 },
                density_boost: uniform(rng, self.density_boost),
            },
            osteophytes: OsteophyteSpec {
                count: rng.gen_range(0..=osteo_cap),
                size_range: (self.osteophyte_size.0 * s, self.osteophyte_size.1 * s),
            },
            implants: rng.gen_bool(self.implant_prob),
            alignment_angle: uniform(rng, self.alignment_range),
            soft_tissue: SoftTissueSpec { count: if rng.gen_bool(self.soft_tissue_prob) { rng.gen_range(1..=self.max_soft_tissue.max(1)) } else { 0 } },
            tibial_spike_height: if rng.gen_bool(self.spike_prob) { uniform(rng, self.spike_height) * s } else { 0.0 },
            oa_grade: 0,
            noise_sigma: uniform(rng, self.noise_sigma),
            rotation: uniform(rng, self.rotation_range),
            grade_rule: self.grade_rule,
            misalignment_threshold: self.misalignment_threshold,
        };
        let spec = PhantomSpec { oa_grade: spec.grade_rule.grade(spec.joint_space.min()), ..spec };
        let meta = self.meta.sample(rng)?;
        Ok((spec, meta))
    }
}

/// SplitMix64 step, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn phantom_id(i: usize) -> String {
    format!("P{:05}", i + 1)
}

/// Samples and renders phantom `index` of a dataset. Same `(dist, seed,
/// index)` always gives the same phantom.
pub fn sample_phantom(dist: &SpecDistribution, seed: u64, index: usize) -> Result<(Scan, AnnotationSet, PhantomSpec)> {
    let item_seed = derive_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let (spec, meta) = dist.sample(&mut rng)?;
    let (scan, ann) = generate_phantom(&spec, item_seed, &phantom_id(index), meta)?;
    Ok((scan, ann, spec))
}

/// In-memory dataset of `n` phantoms.
pub fn generate_batch(n: usize, dist: &SpecDistribution, seed: u64) -> Result<Vec<(Scan, AnnotationSet)>> {
    (0..n).map(|i| sample_phantom(dist, seed, i).map(|(s, a, _)| (s, a))).collect()
}

/// Writes `n` phantoms under `out_dir` (`images/`, `annotations/`,
/// `manifest.jsonl`) and returns the manifest.
pub fn generate_dataset(n: usize, dist: &SpecDistribution, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(CoreError::Usage("n must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    let mut ids = BTreeSet::new();
    for i in 0..n {
        let (scan, ann, _) = sample_phantom(dist, seed, i)?;
        let img_rel = PathBuf::from("images").join(format!("{}.png", scan.id));
        let ann_rel = PathBuf::from("annotations").join(format!("{}.json", scan.id));
        save_image(&scan.image, &out_dir.join(&img_rel))?;
        write_annotations(&out_dir.join(&ann_rel), &ann)?;
        ids.insert(scan.id.clone());
        entries.push(ManifestEntry { scan_id: scan.id, image_path: img_rel, meta: scan.meta, annotations_path: Some(ann_rel), labeled: true });
    }
    let mut manifest = DatasetManifest::new(out_dir, entries);
    manifest.header = Some(ManifestHeader { version: 1, pixel_spacing_mm: None });
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ScanMeta {
        ScanMeta { age_group: AgeGroup::A60To75, gender: Gender::Male, manufacturer: Manufacturer::Others, view: View::Ap }
    }

    #[test]
    fn grade_rule_thresholds() {
        let r = GradeRule::default();
        assert_eq!([r.grade(20.0), r.grade(16.0), r.grade(15.9), r.grade(11.0), r.grade(8.0), r.grade(2.0)], [0, 0, 1, 1, 2, 3]);
    }

    #[test]
    fn level_keypoints_without_rotation() {
        let spec = PhantomSpec::default().with_joint_space(14.0, 9.0);
        let (_, ann) = generate_phantom(&spec, 1, "X", meta()).unwrap();
        let kp = ann.alignment.unwrap().keypoints;
        // Each pair spans both compartments, so the individual Δy are ±2.5
        // and cancel in the pair average.
        let dc = kp.femoral_condyle_right.1 - kp.femoral_condyle_left.1;
        let dp = kp.tibial_plateau_right.1 - kp.tibial_plateau_left.1;
        assert_eq!(dc, -dp);
        let sym = PhantomSpec::default();
        let (_, ann) = generate_phantom(&sym, 1, "X", meta()).unwrap();
        let kp = ann.alignment.unwrap().keypoints;
        assert_eq!(kp.femoral_condyle_left.1, kp.femoral_condyle_right.1);
        assert_eq!(kp.tibial_plateau_left.1, kp.tibial_plateau_right.1);
    }

    #[test]
    fn deterministic() {
        let spec = PhantomSpec {
            osteophytes: OsteophyteSpec { count: 2, size_range: (10.0, 20.0) },
            noise_sigma: 0.02,
            rotation: 7.0,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec, 42, "X", meta()).unwrap();
        let b = generate_phantom(&spec, 42, "X", meta()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_specs_rejected() {
        let too_wide = PhantomSpec::default().with_joint_space(150.0, 150.0);
        assert!(matches!(too_wide.validate(), Err(CoreError::Spec(_))));
        let mut wrong_grade = PhantomSpec::default();
        wrong_grade.oa_grade = 3;
        assert!(wrong_grade.validate().is_err());
        let spike = PhantomSpec { tibial_spike_height: 60.0, ..PhantomSpec::default() };
        assert!(spike.validate().is_err());
    }

    #[test]
    fn distractors_in_range() {
        for kind in [DistractorKind::Lateral, DistractorKind::SingleBone, DistractorKind::Chest, DistractorKind::UniformNoise, DistractorKind::Texture] {
            let img = generate_distractor(kind, 64, 3);
            assert_eq!((img.height(), img.width()), (64, 64));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn seeds_differ_per_index() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
