//! Turning scans and annotations into network inputs and targets.

use kneexr_core::image::{resize, rotate_point};
use kneexr_core::ingest::{preprocess, PreprocessSpec};
use kneexr_core::ingest::DatasetManifest;
use kneexr_core::{AnnotationSet, BoundingBox, CoreError, Image, KeypointSet, Mask, PathologyId, Result, Scan};
use kneexr_nn::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Augmentation, Task, TrainingConfig};

/// Maps raw image coordinates to model coordinates: `model = (raw - origin) * scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: (f64, f64),
    pub scale: (f64, f64),
    pub raw_size: (usize, usize),
}

impl Frame {
    pub fn to_model(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.origin.0) * self.scale.0, (p.1 - self.origin.1) * self.scale.1)
    }

    pub fn to_raw(&self, p: (f64, f64)) -> (f64, f64) {
        (p.0 / self.scale.0 + self.origin.0, p.1 / self.scale.1 + self.origin.1)
    }

    pub fn box_to_model(&self, b: &BoundingBox) -> BoundingBox {
        let (a, c) = (self.to_model((b.x_min, b.y_min)), self.to_model((b.x_max, b.y_max)));
        BoundingBox::new(a.0, a.1, c.0, c.1)
    }

    pub fn box_to_raw(&self, b: &BoundingBox) -> BoundingBox {
        let (a, c) = (self.to_raw((b.x_min, b.y_min)), self.to_raw((b.x_max, b.y_max)));
        BoundingBox::new(a.0, a.1, c.0, c.1).clip(self.raw_size.1 as f64, self.raw_size.0 as f64)
    }
}

fn crop_rect(cfg: &TrainingConfig, h: usize, w: usize) -> (usize, usize, usize, usize) {
    match cfg.crop {
        None => (0, 0, w, h),
        Some(c) => {
            let cw = ((c.size.0 * w as f64).round() as usize).clamp(1, w);
            let ch = ((c.size.1 * h as f64).round() as usize).clamp(1, h);
            let x0 = (c.center.0 * w as f64 - cw as f64 / 2.0).round().clamp(0.0, (w - cw) as f64) as usize;
            let y0 = (c.center.1 * h as f64 - ch as f64 / 2.0).round().clamp(0.0, (h - ch) as f64) as usize;
            (x0, y0, cw, ch)
        }
    }
}

/// Crop, standard preprocessing at the recipe's `input_size`, then
/// resampling to `model_size`.
pub fn prepare_input(img: &Image, cfg: &TrainingConfig) -> Result<(Image, Frame)> {
    let (h, w) = (img.height(), img.width());
    let (x0, y0, cw, ch) = crop_rect(cfg, h, w);
    let cropped = if (cw, ch) == (w, h) { img.clone() } else { img.crop(x0, y0, cw, ch) };
    let spec = PreprocessSpec { target_size: cfg.input_size, ..PreprocessSpec::default() };
    let pre = preprocess(&cropped, &spec)?;
    let (mh, mw) = cfg.model_size;
    let model = resize(&pre, mh, mw);
    let frame = Frame { origin: (x0 as f64, y0 as f64), scale: (mw as f64 / cw as f64, mh as f64 / ch as f64), raw_size: (h, w) };
    Ok((model, frame))
}

pub fn to_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(1, img.height(), img.width(), img.data().to_vec())
}

/// Everything a loss might need, in model coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Target {
    /// Medial and lateral widths in model pixels.
    pub widths: Option<[f64; 2]>,
    pub boxes: Vec<BoundingBox>,
    /// Soft coverage per model pixel.
    pub mask: Option<Image>,
    /// Condyle L, condyle R, plateau L, plateau R.
    pub keypoints: Option<[(f64, f64); 4]>,
    pub angle: Option<f64>,
    pub misaligned: Option<bool>,
    /// Class index for classification tasks (the OA grade for grading).
    pub class_label: Option<u8>,
}

fn mask_to_model(mask: &Mask, cfg: &TrainingConfig, frame: &Frame) -> Image {
    let img = Image::from_fn(mask.height(), mask.width(), |x, y| if mask.get(x, y) { 1.0 } else { 0.0 });
    let (x0, y0, cw, ch) = crop_rect(cfg, mask.height(), mask.width());
    debug_assert_eq!((x0 as f64, y0 as f64), frame.origin);
    let cropped = if (cw, ch) == (img.width(), img.height()) { img } else { img.crop(x0, y0, cw, ch) };
    resize(&cropped, cfg.model_size.0, cfg.model_size.1)
}

fn union_masks(masks: &[Mask], h: usize, w: usize) -> Mask {
    masks.iter().fold(Mask::new(h, w), |acc, m| acc.union(m))
}

pub fn build_target(cfg: &TrainingConfig, ann: &AnnotationSet, frame: &Frame) -> Result<Target> {
    let id: Option<PathologyId> = cfg.pathology.parse().ok();
    let (rh, rw) = frame.raw_size;
    let mut t = Target { class_label: ann.oa_grade, ..Default::default() };
    if let Some(js) = ann.joint_space_widths {
        t.widths = Some([js.medial * frame.scale.1, js.lateral * frame.scale.1]);
    }
    if let Some(al) = &ann.alignment {
        let k = al.keypoints.to_array().map(|p| frame.to_model(p));
        t.keypoints = Some(k);
        t.angle = Some(al.varus_valgus_angle);
        t.misaligned = Some(al.misaligned);
    }
    let boxes: &[BoundingBox] = match id {
        Some(PathologyId::Sclerosis) => &ann.sclerosis_boxes,
        Some(PathologyId::Osteophytes) => &ann.osteophyte_boxes,
        Some(PathologyId::TibialSpike) => &ann.tibial_spike_boxes,
        _ => &[],
    };
    let (mw, mh) = (cfg.model_size.1 as f64, cfg.model_size.0 as f64);
    for b in boxes {
        let m = frame.box_to_model(b);
        let c = m.clip(mw, mh);
        if c.area() >= 0.5 * m.area() && c.area() > 0.0 {
            t.boxes.push(c);
        }
    }
    let masks: &[Mask] = match id {
        Some(PathologyId::Postop) => &ann.implant_masks,
        Some(PathologyId::SoftTissue) => &ann.soft_tissue_masks,
        _ => &[],
    };
    if cfg.task == Task::Segmentation {
        t.mask = Some(mask_to_model(&union_masks(masks, rh, rw), cfg, frame));
    }
    Ok(t)
}

/// One prepared training or validation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scan_id: String,
    pub input: Image,
    pub target: Target,
    pub frame: Frame,
    pub annotations: AnnotationSet,
}

pub fn prepare_sample(cfg: &TrainingConfig, scan: &Scan, ann: &AnnotationSet) -> Result<Sample> {
    let (input, frame) = prepare_input(&scan.image, cfg)?;
    let target = build_target(cfg, ann, &frame)?;
    Ok(Sample { scan_id: scan.id.clone(), input, target, frame, annotations: ann.clone() })
}

/// Loads every labeled entry of a manifest together with its annotations.
pub fn load_labeled(m: &DatasetManifest) -> Result<Vec<(Scan, AnnotationSet)>> {
    let mut out = Vec::with_capacity(m.len());
    for e in &m.entries {
        let ann = m
            .load_annotations(e)?
            .ok_or_else(|| CoreError::Usage(format!("scan {} has no annotations; training needs labeled entries", e.scan_id)))?;
        out.push((m.load_scan(e)?, ann));
    }
    Ok(out)
}

fn swap_lr(k: [(f64, f64); 4]) -> [(f64, f64); 4] {
    [k[1], k[0], k[3], k[2]]
}

/// Resamples `img` through an inverse map from output to source position.
fn warp(img: &Image, inv: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    Image::from_fn(img.height(), img.width(), |x, y| {
        let (sx, sy) = inv(x as f64 + 0.5, y as f64 + 0.5);
        img.sample(sx, sy)
    })
}

/// Draws one random augmentation and applies it to image and target alike.
pub fn augment(img: &Image, t: &Target, aug: &Augmentation, rng: &mut ChaCha8Rng) -> (Image, Target) {
    let mut img = img.clone();
    let mut t = t.clone();
    if aug.is_none() {
        return (img, t);
    }
    let (h, w) = (img.height(), img.width());
    let (wf, hf) = (w as f64, h as f64);
    if aug.flip && rng.gen_bool(aug.prob) {
        img = img.flip_horizontal();
        let flip_box = |b: &BoundingBox| BoundingBox::new(wf - b.x_max, b.y_min, wf - b.x_min, b.y_max);
        t.boxes = t.boxes.iter().map(flip_box).collect();
        t.widths = t.widths.map(|[m, l]| [l, m]);
        t.keypoints = t.keypoints.map(|k| swap_lr(k.map(|p| (wf - p.0, p.1))));
        t.mask = t.mask.map(|m| m.flip_horizontal());
        t.angle = t.angle.map(|a| -a);
    }
    let theta = if aug.rotation_deg > 0.0 && rng.gen_bool(aug.prob) { rng.gen_range(-aug.rotation_deg..=aug.rotation_deg) } else { 0.0 };
    let k = if aug.scale > 0.0 && rng.gen_bool(aug.prob) { 1.0 + rng.gen_range(-aug.scale..=aug.scale) } else { 1.0 };
    if theta != 0.0 || k != 1.0 {
        let (cx, cy) = (wf / 2.0, hf / 2.0);
        let fwd = |p: (f64, f64)| {
            let r = rotate_point(p, theta, w, h);
            (cx + k * (r.0 - cx), cy + k * (r.1 - cy))
        };
        let inv = |x: f64, y: f64| rotate_point((cx + (x - cx) / k, cy + (y - cy) / k), -theta, w, h);
        img = warp(&img, inv);
        t.mask = t.mask.map(|m| warp(&m, inv));
        t.boxes = t
            .boxes
            .iter()
            .map(|b| BoundingBox::from_points(&[(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)].map(fwd)).clip(wf, hf))
            .collect();
        t.keypoints = t.keypoints.map(|kp| kp.map(fwd));
        t.widths = t.widths.map(|ws| ws.map(|v| v * k));
    }
    if aug.elastic > 0.0 && rng.gen_bool(aug.prob) {
        let a = aug.elastic;
        let (p1, p2) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
        let (f1, f2) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
        let inv = move |x: f64, y: f64| {
            (x + a * (std::f64::consts::TAU * f1 * y / hf + p1).sin(), y + a * (std::f64::consts::TAU * f2 * x / wf + p2).sin())
        };
        img = warp(&img, inv);
        t.mask = t.mask.map(|m| warp(&m, inv));
    }
    if aug.brightness > 0.0 && rng.gen_bool(aug.prob) {
        let f = 1.0 + rng.gen_range(-aug.brightness..=aug.brightness) as f32;
        img = img.map(|v| v * f);
    }
    (img, t)
}

/// Keypoints back in raw coordinates.
pub fn keypoints_to_raw(k: [(f64, f64); 4], frame: &Frame) -> KeypointSet {
    let (rh, rw) = frame.raw_size;
    KeypointSet::from_array(k.map(|p| {
        let r = frame.to_raw(p);
        (r.0.clamp(0.0, rw as f64), r.1.clamp(0.0, rh as f64))
    }))
}
