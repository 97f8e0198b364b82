//! Network construction, losses per task, the generic training loop and
//! inference for every single-model component.

use std::path::Path;

use kneexr_core::metrics::{dice, match_detections, ConfusionMatrix};
use kneexr_core::{AlignmentPrediction, BoundingBox, CoreError, Finding, Image, JointSpaceWidths, KeypointSet, Mask, Region, Result};
use kneexr_nn::loss::{bce_with_logits, cross_entropy_with_logits, dice_loss, focal_with_logits, mse_grad, sigmoid, smooth_l1, softmax};
use kneexr_nn::{ArchSpec, Checkpoint, LayerSpec, Network, Optimizer, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_grid, match_anchors, nms, Anchor, AnchorLabel};
use crate::config::{LossSpec, Task, TrainingConfig};
use crate::data::{augment, keypoints_to_raw, prepare_input, to_tensor, Frame, Sample, Target};

pub const CHECKPOINT_KIND: &str = "kneexr-model";
const POS_IOU: f64 = 0.5;
const NEG_IOU: f64 = 0.4;
/// Scaling between regression targets in model pixels and network units.
const PX_UNIT: f64 = 4.0;
const ANGLE_UNIT: f64 = 10.0;
const MIN_SEGMENT_PIXELS: usize = 8;

/// A detector or segmenter output in raw image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub region: Region,
    pub confidence: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn to_finding(&self) -> Finding {
        Finding { region: self.region.clone(), confidence: self.confidence }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPrediction {
    pub keypoints: KeypointSet,
    /// Same order as [`KeypointSet::to_array`].
    pub confidences: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Widths(JointSpaceWidths),
    Detections(Vec<Detection>),
    Alignment { landmarks: LandmarkPrediction, prediction: AlignmentPrediction },
    Classes(Vec<f64>),
}

fn conv(out: usize, kernel: usize) -> [LayerSpec; 2] {
    [LayerSpec::Conv { out, kernel }, LayerSpec::Relu]
}

fn anchor_scales_model(cfg: &TrainingConfig) -> Vec<f64> {
    let (kx, ky) = cfg.input_to_model();
    let k = (kx * ky).sqrt();
    cfg.anchors.as_ref().map(|a| a.scales.iter().map(|s| s * k).collect()).unwrap_or_default()
}

/// Output stride of the spatial head for detection and keypoint tasks.
pub fn head_stride(cfg: &TrainingConfig) -> usize {
    match cfg.task {
        Task::Detection => {
            let smallest = anchor_scales_model(cfg).into_iter().fold(f64::INFINITY, f64::min);
            if smallest < 16.0 { 4 } else { 8 }
        }
        Task::KeypointClassification => {
            if cfg.model_size.0 <= 64 { 2 } else { 4 }
        }
        _ => 1,
    }
}

pub fn anchors_per_cell(cfg: &TrainingConfig) -> usize {
    cfg.anchors.as_ref().map(|a| a.scales.len() * a.ratios.len()).unwrap_or(0)
}

pub fn build_arch(cfg: &TrainingConfig) -> ArchSpec {
    let w = cfg.width;
    let input = (1, cfg.model_size.0, cfg.model_size.1);
    let pool = LayerSpec::MaxPool2;
    let mut trunk: Vec<LayerSpec> = Vec::new();
    let mut heads: Vec<Vec<LayerSpec>> = Vec::new();
    match cfg.task {
        Task::Regression | Task::Classification => {
            for c in [w, w, 2 * w, 4 * w] {
                trunk.extend(conv(c, 3));
                trunk.push(pool.clone());
            }
            trunk.extend([LayerSpec::Flatten, LayerSpec::Dense { out: 64 }, LayerSpec::Relu]);
            if let Some(rate) = cfg.dropout_rate {
                trunk.push(LayerSpec::Dropout { rate });
            }
            let out = if cfg.task == Task::Regression { 2 } else { cfg.num_classes };
            trunk.push(LayerSpec::Dense { out });
        }
        Task::Detection => {
            trunk.extend(conv(w, 3));
            trunk.push(pool.clone());
            trunk.extend(conv(2 * w, 3));
            trunk.push(pool.clone());
            if head_stride(cfg) == 8 {
                trunk.extend(conv(2 * w, 3));
                trunk.push(pool.clone());
            }
            trunk.extend(conv(2 * w, 3));
            trunk.extend(conv(2 * w, 3));
            heads.push(vec![LayerSpec::Conv { out: 5 * anchors_per_cell(cfg), kernel: 1 }]);
        }
        Task::Segmentation => {
            trunk.extend(conv(w, 3));
            trunk.extend(conv(w, 3));
            trunk.extend(conv(w, 5));
            heads.push(vec![LayerSpec::Conv { out: 1, kernel: 3 }]);
            if matches!(cfg.loss, LossSpec::MaskBceBox { .. }) {
                heads.push(vec![LayerSpec::GlobalAvgPool, LayerSpec::Dense { out: 4 }]);
            }
        }
        Task::KeypointClassification => {
            trunk.extend(conv(w, 3));
            trunk.push(pool.clone());
            trunk.extend(conv(2 * w, 3));
            if head_stride(cfg) == 4 {
                trunk.push(pool.clone());
            }
            trunk.extend(conv(2 * w, 3));
            trunk.extend(conv(2 * w, 5));
            heads.push(vec![LayerSpec::Conv { out: 4, kernel: 3 }]);
            heads.push(vec![
                pool.clone(),
                pool.clone(),
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 2 },
            ]);
        }
    }
    ArchSpec { input, trunk, heads }
}

/// Spatial softmax of each channel and its expected position in model pixels.
pub struct SoftArgmax {
    pub probs: Vec<Vec<f64>>,
    pub coords: Vec<(f64, f64)>,
    stride: f64,
    w: usize,
}

impl SoftArgmax {
    pub fn new(map: &Tensor, stride: usize) -> Self {
        let n = map.h * map.w;
        let s = stride as f64;
        let mut probs = Vec::with_capacity(map.c);
        let mut coords = Vec::with_capacity(map.c);
        for ch in 0..map.c {
            let logits: Vec<f64> = map.plane(ch).iter().map(|&v| v as f64).collect();
            let p = softmax(&logits);
            let (mut ex, mut ey) = (0.0, 0.0);
            for (i, pi) in p.iter().enumerate().take(n) {
                ex += pi * ((i % map.w) as f64 + 0.5) * s;
                ey += pi * ((i / map.w) as f64 + 0.5) * s;
            }
            probs.push(p);
            coords.push((ex, ey));
        }
        SoftArgmax { probs, coords, stride: s, w: map.w }
    }

    /// Gradient w.r.t. the logits given gradients w.r.t. the coordinates.
    pub fn backward(&self, dcoords: &[(f64, f64)]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.probs.len() * self.probs[0].len());
        for (ch, p) in self.probs.iter().enumerate() {
            let (ex, ey) = self.coords[ch];
            let (gx, gy) = dcoords[ch];
            for (i, pi) in p.iter().enumerate() {
                let px = ((i % self.w) as f64 + 0.5) * self.stride;
                let py = ((i / self.w) as f64 + 0.5) * self.stride;
                out.push((pi * ((px - ex) * gx + (py - ey) * gy)) as f32);
            }
        }
        out
    }

    /// Probability mass within one cell of the mode.
    pub fn peak_mass(&self, ch: usize) -> f64 {
        let p = &self.probs[ch];
        let h = p.len() / self.w;
        let (mi, _) = p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let (mx, my) = ((mi % self.w) as isize, (mi / self.w) as isize);
        let mut s = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (mx + dx, my + dy);
                if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < h {
                    s += p[y as usize * self.w + x as usize];
                }
            }
        }
        s.clamp(0.0, 1.0)
    }
}

fn vec_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn like(t: &Tensor, data: Vec<f32>) -> Tensor {
    Tensor::from_vec(t.c, t.h, t.w, data)
}

/// A trained (or freshly initialized) single-network component.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainingConfig,
    pub net: Network,
    anchors: Vec<Anchor>,
}

impl Model {
    pub fn new(config: TrainingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Network::new(build_arch(&config), seed)?;
        let anchors = model_anchors(&config);
        if config.task == Task::Detection {
            // Rare-object prior on the objectness logits.
            let a = anchors_per_cell(&config);
            let mut bias = vec![0.0f32; 5 * a];
            bias[..a].iter_mut().for_each(|b| *b = -(99.0f32).ln());
            net.set_head_bias(0, &bias)?;
            net.scale_head_weights(0, 0.05)?;
        }
        Ok(Model { config, net, anchors })
    }

    pub fn component(&self) -> &str {
        &self.config.pathology
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "component": self.config.pathology,
            "config": self.config,
            "extra": extra,
        });
        Checkpoint::from_network(&self.net, meta)
    }

    /// Rebuilds a model, checking that the embedded configuration still
    /// produces the stored architecture and names the expected component.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&str>) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(CoreError::Integrity("checkpoint is not a kneexr model".into()));
        }
        let config: TrainingConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| CoreError::Integrity(format!("checkpoint config: {e}")))?;
        if let Some(want) = expected {
            if config.pathology != want {
                return Err(CoreError::Integrity(format!("checkpoint holds component {:?}, expected {want:?}", config.pathology)));
            }
        }
        if build_arch(&config) != ckpt.arch {
            return Err(CoreError::Integrity(format!("checkpoint architecture does not match its {} configuration", config.pathology)));
        }
        config.validate()?;
        let net = ckpt.network()?;
        let anchors = model_anchors(&config);
        Ok(Model { config, net, anchors })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        Ok(self.to_checkpoint(extra).save(path)?)
    }

    pub fn load(path: &Path, expected: Option<&str>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }

    pub fn forward(&self, input: &Image) -> Vec<Tensor> {
        self.net.forward(&to_tensor(input))
    }

    /// Full inference from a raw image.
    pub fn predict(&self, image: &Image) -> Result<Output> {
        let (input, frame) = prepare_input(image, &self.config)?;
        Ok(self.predict_prepared(&input, &frame))
    }

    pub fn predict_prepared(&self, input: &Image, frame: &Frame) -> Output {
        let outs = self.forward(input);
        decode(self, &outs, frame)
    }
}

fn model_anchors(cfg: &TrainingConfig) -> Vec<Anchor> {
    match (&cfg.anchors, cfg.task) {
        (Some(a), Task::Detection) => anchor_grid(cfg.model_size, head_stride(cfg), &anchor_scales_model(cfg), &a.ratios),
        _ => Vec::new(),
    }
}

fn decode(model: &Model, outs: &[Tensor], frame: &Frame) -> Output {
    let cfg = &model.config;
    match cfg.task {
        Task::Regression => {
            let v = &outs[0].data;
            let to_raw = |x: f32| (x as f64 * PX_UNIT / frame.scale.1).max(0.0);
            Output::Widths(JointSpaceWidths { medial: to_raw(v[0]), lateral: to_raw(v[1]) })
        }
        Task::Classification => {
            let logits: Vec<f64> = outs[0].data.iter().map(|&v| v as f64).collect();
            Output::Classes(softmax(&logits))
        }
        Task::Detection => Output::Detections(decode_boxes(model, &outs[0], frame)),
        Task::Segmentation => Output::Detections(decode_segments(&outs[0], frame)),
        Task::KeypointClassification => {
            let sa = SoftArgmax::new(&outs[0], head_stride(cfg));
            let pts = [sa.coords[0], sa.coords[1], sa.coords[2], sa.coords[3]];
            let landmarks = LandmarkPrediction { keypoints: keypoints_to_raw(pts, frame), confidences: [0, 1, 2, 3].map(|c| sa.peak_mass(c)) };
            let v = &outs[1].data;
            let prediction = AlignmentPrediction { angle: v[0] as f64 * ANGLE_UNIT, misaligned_prob: sigmoid(v[1] as f64) };
            Output::Alignment { landmarks, prediction }
        }
    }
}

fn decode_boxes(model: &Model, out: &Tensor, frame: &Frame) -> Vec<Detection> {
    let cfg = &model.config;
    let a = anchors_per_cell(cfg);
    let cells = out.h * out.w;
    let (mw, mh) = (cfg.model_size.1 as f64, cfg.model_size.0 as f64);
    let mut cand: Vec<(f64, BoundingBox)> = Vec::new();
    for (i, anchor) in model.anchors.iter().enumerate() {
        let (cell, k) = (i / a, i % a);
        let p = sigmoid(out.data[k * cells + cell] as f64);
        if p < cfg.score_threshold {
            continue;
        }
        let d = [0, 1, 2, 3].map(|j| out.data[(a + 4 * k + j) * cells + cell] as f64);
        let b = anchor.decode(d).clip(mw, mh);
        if b.area() > 0.0 {
            cand.push((p, b));
        }
    }
    cand.sort_by(|x, y| y.0.total_cmp(&x.0));
    cand.truncate(200);
    let boxes: Vec<BoundingBox> = cand.iter().map(|c| c.1).collect();
    let scores: Vec<f64> = cand.iter().map(|c| c.0).collect();
    nms(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .map(|i| Detection { region: Region::Box(frame.box_to_raw(&boxes[i])), confidence: scores[i], class_id: 0 })
        .collect()
}

/// Thresholds the probability map in raw resolution and splits it into
/// 4-connected components.
fn decode_segments(out: &Tensor, frame: &Frame) -> Vec<Detection> {
    let prob = Image::from_vec(out.h, out.w, out.data.iter().map(|&z| sigmoid(z as f64) as f32).collect());
    let (rh, rw) = frame.raw_size;
    let mut pmap = vec![0.0f32; rh * rw];
    let mut fg = vec![false; rh * rw];
    for y in 0..rh {
        for x in 0..rw {
            let (mx, my) = frame.to_model((x as f64 + 0.5, y as f64 + 0.5));
            if mx < 0.0 || my < 0.0 || mx >= out.w as f64 || my >= out.h as f64 {
                continue;
            }
            let p = prob.sample_clamped(mx, my);
            pmap[y * rw + x] = p;
            fg[y * rw + x] = p >= 0.5;
        }
    }
    let mut seen = vec![false; rh * rw];
    let mut out_d = Vec::new();
    for start in 0..rh * rw {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % rw, i / rw);
            let mut push = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < rw {
                push(i + 1);
            }
            if y > 0 {
                push(i - rw);
            }
            if y + 1 < rh {
                push(i + rw);
            }
        }
        if pixels.len() < MIN_SEGMENT_PIXELS {
            continue;
        }
        let mut mask = Mask::new(rh, rw);
        let mut conf = 0.0;
        for &i in &pixels {
            mask.set(i % rw, i / rw, true);
            conf += pmap[i] as f64;
        }
        out_d.push(Detection { region: Region::Mask(mask), confidence: (conf / pixels.len() as f64).clamp(0.0, 1.0), class_id: 0 });
    }
    out_d
}

/// Loss value and gradients w.r.t. each network output for one sample.
pub fn sample_loss(model: &Model, outs: &[Tensor], t: &Target) -> Result<(f64, Vec<Tensor>)> {
    let cfg = &model.config;
    let missing = |what: &str| CoreError::Usage(format!("{}: sample lacks a {what} target", cfg.pathology));
    match (cfg.task, cfg.loss) {
        (Task::Regression, _) => {
            let w = t.widths.ok_or_else(|| missing("joint-space"))?;
            let pred: Vec<f64> = outs[0].data.iter().map(|&v| v as f64).collect();
            let lg = mse_grad(&pred, &[w[0] / PX_UNIT, w[1] / PX_UNIT])?;
            Ok((lg.value, vec![like(&outs[0], vec_f32(&lg.grad))]))
        }
        (Task::Classification, _) => {
            let label = t.class_label.ok_or_else(|| missing("class"))? as usize;
            let logits: Vec<f64> = outs[0].data.iter().map(|&v| v as f64).collect();
            let lg = cross_entropy_with_logits(&logits, label)?;
            Ok((lg.value, vec![like(&outs[0], vec_f32(&lg.grad))]))
        }
        (Task::Detection, loss) => Ok(detection_loss(model, &outs[0], &t.boxes, loss)),
        (Task::Segmentation, loss) => {
            let gt = t.mask.as_ref().ok_or_else(|| missing("mask"))?;
            segmentation_loss(outs, gt, loss)
        }
        (Task::KeypointClassification, LossSpec::MseBce { bce_weight, keypoint_weight }) => {
            keypoint_loss(cfg, outs, t, bce_weight, keypoint_weight)
        }
        (task, loss) => Err(CoreError::Spec(format!("loss {loss:?} does not apply to task {task:?}"))),
    }
}

fn detection_loss(model: &Model, out: &Tensor, gts: &[BoundingBox], loss: LossSpec) -> (f64, Vec<Tensor>) {
    let a = anchors_per_cell(&model.config);
    let cells = out.h * out.w;
    let labels = match_anchors(&model.anchors, gts, POS_IOU, NEG_IOU);
    let npos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
    let nneg = labels.iter().filter(|l| **l == AnchorLabel::Negative).count();
    let mut grad = vec![0.0f32; out.len()];
    let mut total = 0.0;
    let (box_weight, beta) = match loss {
        LossSpec::FocalBox { box_weight, beta, .. } | LossSpec::ClassBox { box_weight, beta } => (box_weight, beta),
        _ => (1.0, 1.0),
    };
    let norm_pos = npos.max(1) as f64;
    for (i, label) in labels.iter().enumerate() {
        let (cell, k) = (i / a, i % a);
        let zi = k * cells + cell;
        let z = out.data[zi] as f64;
        let pos = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Positive(_) => true,
            AnchorLabel::Negative => false,
        };
        let (l, dz) = match loss {
            LossSpec::FocalBox { gamma, alpha, .. } => {
                let (l, dz) = focal_with_logits(z, pos, gamma, alpha);
                (l / norm_pos, dz / norm_pos)
            }
            _ => {
                let (l, dz) = bce_with_logits(z, if pos { 1.0 } else { 0.0 });
                let n = if pos { norm_pos } else { nneg.max(1) as f64 };
                (l / n, dz / n)
            }
        };
        total += l;
        grad[zi] = dz as f32;
        if let AnchorLabel::Positive(g) = *label {
            let target = model.anchors[i].encode(&gts[g]);
            let idx = [0, 1, 2, 3].map(|j| (a + 4 * k + j) * cells + cell);
            let pred = idx.map(|j| out.data[j] as f64);
            let lg = smooth_l1(&pred, &target, beta).expect("four deltas");
            // smooth_l1 averages; rescale to a sum over the four deltas.
            let s = 4.0 * box_weight / norm_pos;
            total += lg.value * s;
            for (j, g) in idx.iter().zip(&lg.grad) {
                grad[*j] = (g * s) as f32;
            }
        }
    }
    (total, vec![like(out, grad)])
}

fn segmentation_loss(outs: &[Tensor], gt: &Image, loss: LossSpec) -> Result<(f64, Vec<Tensor>)> {
    let z: Vec<f64> = outs[0].data.iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let n = z.len() as f64;
    let mut total = 0.0;
    let mut dz = vec![0.0f64; z.len()];
    let bce_weight = match loss {
        LossSpec::DiceBce { bce_weight } => bce_weight,
        _ => 1.0,
    };
    for i in 0..z.len() {
        let (l, d) = bce_with_logits(z[i], g[i]);
        total += bce_weight * l / n;
        dz[i] += bce_weight * d / n;
    }
    let mut grads = Vec::new();
    match loss {
        LossSpec::DiceBce { .. } => {
            let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let lg = dice_loss(&p, &g)?;
            total += lg.value;
            for i in 0..z.len() {
                dz[i] += lg.grad[i] * p[i] * (1.0 - p[i]);
            }
            grads.push(like(&outs[0], vec_f32(&dz)));
        }
        LossSpec::MaskBceBox { box_weight, beta } => {
            grads.push(like(&outs[0], vec_f32(&dz)));
            let mut gbox = vec![0.0f32; 4];
            let present = Mask::from_fn(gt.height(), gt.width(), |x, y| gt.get(x, y) >= 0.5).bounding_box();
            if let Some(b) = present {
                let (w, h) = (gt.width() as f64, gt.height() as f64);
                let target = [b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h];
                let pred: Vec<f64> = outs[1].data.iter().map(|&v| v as f64).collect();
                let lg = smooth_l1(&pred, &target, beta)?;
                total += box_weight * lg.value;
                gbox = lg.grad.iter().map(|v| (v * box_weight) as f32).collect();
            }
            grads.push(like(&outs[1], gbox));
        }
        other => return Err(CoreError::Spec(format!("loss {other:?} does not apply to segmentation"))),
    }
    Ok((total, grads))
}

fn keypoint_loss(cfg: &TrainingConfig, outs: &[Tensor], t: &Target, bce_weight: f64, kp_weight: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut gmap = vec![0.0f32; outs[0].len()];
    if let Some(kp) = t.keypoints {
        let sa = SoftArgmax::new(&outs[0], head_stride(cfg));
        let mut d = [(0.0, 0.0); 4];
        for (j, (p, q)) in sa.coords.iter().zip(kp.iter()).enumerate() {
            let (rx, ry) = ((p.0 - q.0) / PX_UNIT, (p.1 - q.1) / PX_UNIT);
            total += kp_weight * (rx * rx + ry * ry) / 8.0;
            d[j] = (kp_weight * 2.0 * rx / (8.0 * PX_UNIT), kp_weight * 2.0 * ry / (8.0 * PX_UNIT));
        }
        gmap = sa.backward(&d);
    }
    let mut ghead = vec![0.0f32; 2];
    if let Some(angle) = t.angle {
        let r = outs[1].data[0] as f64 - angle / ANGLE_UNIT;
        total += r * r;
        ghead[0] = (2.0 * r) as f32;
    }
    if let Some(m) = t.misaligned {
        let (l, dz) = bce_with_logits(outs[1].data[1] as f64, if m { 1.0 } else { 0.0 });
        total += bce_weight * l;
        ghead[1] = (bce_weight * dz) as f32;
    }
    Ok((total, vec![like(&outs[0], gmap), like(&outs[1], ghead)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: u32,
    pub seed: u64,
    /// Global gradient-norm ceiling per batch.
    pub clip_norm: Option<f32>,
}

impl TrainOptions {
    pub fn new(epochs: u32, seed: u64) -> Self {
        TrainOptions { epochs, seed, clip_norm: Some(10.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub metric: String,
    pub val_metric: f64,
    /// Best validation value seen so far, in the metric's own direction.
    pub best_val: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: u32,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
}

/// Validation metric name and whether larger is better.
pub fn metric_of(cfg: &TrainingConfig) -> (&'static str, bool) {
    match cfg.task {
        Task::Regression => ("mse_px2", false),
        Task::Classification => ("accuracy", true),
        Task::Detection => ("f1_iou50", true),
        Task::Segmentation => ("dice", true),
        Task::KeypointClassification if cfg.pathology == "alignment" => ("angle_mae_deg", false),
        Task::KeypointClassification => ("keypoint_err_px", false),
    }
}

fn gt_boxes<'a>(cfg: &TrainingConfig, s: &'a Sample) -> &'a [BoundingBox] {
    match cfg.pathology.as_str() {
        "sclerosis" => &s.annotations.sclerosis_boxes,
        "osteophytes" => &s.annotations.osteophyte_boxes,
        "tibial_spike" => &s.annotations.tibial_spike_boxes,
        _ => &[],
    }
}

fn gt_masks<'a>(cfg: &TrainingConfig, s: &'a Sample) -> &'a [Mask] {
    match cfg.pathology.as_str() {
        "postop" => &s.annotations.implant_masks,
        "soft_tissue" => &s.annotations.soft_tissue_masks,
        _ => &[],
    }
}

/// Validation metric of `model` over prepared samples, in raw coordinates.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let cfg = &model.config;
    let n = samples.len() as f64;
    let mut cm = ConfusionMatrix::default();
    let mut acc = 0.0;
    for s in samples {
        let out = model.predict_prepared(&s.input, &s.frame);
        match out {
            Output::Widths(w) => {
                let g = s.annotations.joint_space_widths.ok_or_else(|| CoreError::Usage(format!("{}: no widths", s.scan_id)))?;
                acc += ((w.medial - g.medial).powi(2) + (w.lateral - g.lateral).powi(2)) / 2.0;
            }
            Output::Classes(p) => {
                let label = s.target.class_label.ok_or_else(|| CoreError::Usage(format!("{}: no class label", s.scan_id)))?;
                acc += (kneexr_core::argmax_low(&p) == label as usize) as u8 as f64;
            }
            Output::Detections(d) if cfg.task == Task::Detection => {
                let preds: Vec<BoundingBox> = d
                    .iter()
                    .filter_map(|x| match &x.region {
                        Region::Box(b) => Some(*b),
                        _ => None,
                    })
                    .collect();
                cm += match_detections(&preds, gt_boxes(cfg, s), 0.5);
            }
            Output::Detections(d) => {
                let (rh, rw) = s.frame.raw_size;
                let pred = d.iter().fold(Mask::new(rh, rw), |m, x| match &x.region {
                    Region::Mask(k) => m.union(k),
                    _ => m,
                });
                let gt = gt_masks(cfg, s).iter().fold(Mask::new(rh, rw), |m, k| m.union(k));
                acc += dice(&pred, &gt)?;
            }
            Output::Alignment { landmarks, prediction } => {
                if cfg.pathology == "alignment" {
                    let g = s.annotations.alignment.as_ref().map(|a| a.varus_valgus_angle).unwrap_or(0.0);
                    acc += (prediction.angle - g).abs();
                } else if let Some(a) = &s.annotations.alignment {
                    let e: f64 = landmarks
                        .keypoints
                        .to_array()
                        .iter()
                        .zip(a.keypoints.to_array())
                        .map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                        .sum();
                    acc += e / 4.0;
                }
            }
        }
    }
    if cfg.task == Task::Detection {
        return Ok(kneexr_core::metrics::f1(&cm).unwrap_or(0.0));
    }
    Ok(acc / n)
}

/// Mini-batch training with best-on-validation model selection. Samples are
/// visited in a seeded shuffled order and gradients are summed in that order,
/// so a run is reproducible bit for bit.
pub fn train(config: &TrainingConfig, train: &[Sample], val: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(CoreError::Usage(format!("{}: empty training set", config.pathology)));
    }
    let mut model = Model::new(config.clone(), opts.seed)?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(2);
    let (metric, higher) = metric_of(config);
    let mut best: Option<(f64, Network, u32)> = None;
    let mut history = Vec::new();
    let mut iter: u64 = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.net.zero_grads();
            for &i in batch {
                let s = &train[i];
                let (img, t) = augment(&s.input, &s.target, &config.augmentation, &mut rng);
                let (outs, trace) = model.net.forward_train(&to_tensor(&img), &mut rng);
                let (l, g) = sample_loss(&model, &outs, &t)?;
                if !l.is_finite() {
                    return Err(CoreError::Usage(format!("{}: loss diverged at epoch {epoch}", config.pathology)));
                }
                epoch_loss += l;
                model.net.backward(&trace, &g, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f32);
            if let Some(c) = opts.clip_norm {
                let norm = grads.l2_norm();
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            lr = config.lr_schedule.rate(epoch, iter);
            opt.step(&mut model.net, &grads, lr as f32);
            iter += 1;
        }
        let v = evaluate(&model, val)?;
        let better = match &best {
            None => true,
            Some((b, _, _)) => v.is_nan() || (if higher { v > *b } else { v < *b }),
        };
        if better {
            best = Some((v, model.net.clone(), epoch));
        }
        let best_val = best.as_ref().map(|b| b.0).unwrap_or(v);
        log::info!("{} epoch {epoch}: loss {:.5} {metric} {v:.4}", config.pathology, epoch_loss / train.len() as f64);
        history.push(EpochRecord { epoch, train_loss: epoch_loss / train.len() as f64, metric: metric.to_string(), val_metric: v, best_val, lr });
    }
    let best_epoch = match best {
        Some((_, net, e)) => {
            model.net = net;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Prepares samples for a configuration; order follows the input.
pub fn prepare_all(config: &TrainingConfig, data: &[(kneexr_core::Scan, kneexr_core::AnnotationSet)]) -> Result<Vec<Sample>> {
    data.iter().map(|(s, a)| crate::data::prepare_sample(config, s, a)).collect()
}

/// Trains one pathology model from manifests already narrowed with
/// `select_for_pathology`.
pub fn train_detector(
    config: &TrainingConfig,
    train_manifest: &kneexr_core::ingest::DatasetManifest,
    val_manifest: &kneexr_core::ingest::DatasetManifest,
    epochs: u32,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_manifest.is_empty() {
        return Err(CoreError::Usage(format!("{}: training manifest is empty", config.pathology)));
    }
    let tr = prepare_all(config, &crate::data::load_labeled(train_manifest)?)?;
    let va = prepare_all(config, &crate::data::load_labeled(val_manifest)?)?;
    train(config, &tr, &va, &TrainOptions::new(epochs, seed))
}
