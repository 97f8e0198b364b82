//! The four-stage verification cascade run before any pathology model.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use kneexr_core::image::{rotate, rotate_point};
use kneexr_core::phantom::{derive_seed, generate_distractor, DistractorKind};
use kneexr_core::{
    Alignment, AnnotationSet, CoreError, Decision, GateResult, GateStage, Image, KeypointSet, Result, Scan, StageOutcome, View, ViewOutcome,
};
use kneexr_nn::{LrSchedule, OptimizerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Augmentation, LossSpec, Task, TrainingConfig};
use crate::data::{prepare_input, Sample, Target};
use crate::detect::{train, LandmarkPrediction, Model, Output, TrainOptions, TrainOutcome};

pub const GATE_MODALITY: &str = "gate_modality";
pub const GATE_ANATOMY: &str = "gate_anatomy";
pub const GATE_VIEW: &str = "gate_view";
pub const GATE_LANDMARKS: &str = "gate_landmarks";
pub const GATE_COMPONENTS: [&str; 4] = [GATE_MODALITY, GATE_ANATOMY, GATE_VIEW, GATE_LANDMARKS];
/// Largest rotation the correction stage will apply.
pub const MAX_ROTATION_DEG: f64 = 45.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateThresholds {
    pub modality: f64,
    pub anatomy: f64,
    /// Minimum AP probability for the view stage to accept.
    pub view: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds { modality: 0.5, anatomy: 0.5, view: 0.5 }
    }
}

fn classifier(name: &str) -> TrainingConfig {
    TrainingConfig {
        pathology: name.to_string(),
        task: Task::Classification,
        input_size: (256, 256),
        model_size: (64, 64),
        crop: None,
        loss: LossSpec::CrossEntropy,
        optimizer: OptimizerKind::Adam,
        lr_schedule: LrSchedule::constant(0.001),
        batch_size: 16,
        dropout_rate: None,
        anchors: None,
        augmentation: Augmentation::none(),
        width: 4,
        score_threshold: 0.5,
        nms_iou: 0.5,
        num_classes: 2,
    }
}

pub fn gate_config(component: &str) -> Result<TrainingConfig> {
    match component {
        GATE_MODALITY | GATE_ANATOMY | GATE_VIEW => Ok(classifier(component)),
        GATE_LANDMARKS => Ok(TrainingConfig {
            task: Task::KeypointClassification,
            loss: LossSpec::MseBce { bce_weight: 0.0, keypoint_weight: 1.0 },
            width: 8,
            ..classifier(component)
        }),
        other => Err(CoreError::Usage(format!("unknown gate component {other:?}; expected one of {}", GATE_COMPONENTS.join(", ")))),
    }
}

/// Mean direction of the condyle pair and the plateau pair, in degrees.
/// Applying `-angle` with [`correct_rotation`] levels both pairs.
pub fn rotation_angle(k: &KeypointSet) -> Result<f64> {
    let pairs = [(k.femoral_condyle_left, k.femoral_condyle_right), (k.tibial_plateau_left, k.tibial_plateau_right)];
    let mut sum = 0.0;
    for (a, b) in pairs {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        if dx.hypot(dy) < 1e-9 || !dx.is_finite() || !dy.is_finite() {
            return Err(CoreError::Integrity("degenerate landmark geometry: coincident pair points".into()));
        }
        sum += dy.atan2(dx).to_degrees();
    }
    Ok(sum / 2.0)
}

pub fn correct_rotation(image: &Image, angle: f64) -> Image {
    rotate(image, -angle)
}

fn accept_prob(m: &Model, image: &Image) -> Result<f64> {
    match m.predict(image)? {
        Output::Classes(p) => Ok(p[1]),
        _ => Err(CoreError::Integrity(format!("{} is not a classifier", m.component()))),
    }
}

/// Trained cascade. Stage call counters make short-circuiting observable.
#[derive(Debug)]
pub struct Gatekeeper {
    pub modality: Model,
    pub anatomy: Model,
    pub view: Model,
    pub landmarks: Model,
    pub thresholds: GateThresholds,
    calls: [AtomicUsize; 4],
}

impl Gatekeeper {
    pub fn new(models: [Model; 4], thresholds: GateThresholds) -> Result<Self> {
        for (m, want) in models.iter().zip(GATE_COMPONENTS) {
            if m.component() != want {
                return Err(CoreError::Integrity(format!("gate slot {want} holds {}", m.component())));
            }
        }
        let [modality, anatomy, view, landmarks] = models;
        Ok(Gatekeeper { modality, anatomy, view, landmarks, thresholds, calls: Default::default() })
    }

    /// Loads `<component>.ckpt` for each stage from `dir`.
    pub fn load(dir: &Path, thresholds: GateThresholds) -> Result<Self> {
        let load = |c: &str| Model::load(&dir.join(format!("{c}.ckpt")), Some(c));
        Self::new([load(GATE_MODALITY)?, load(GATE_ANATOMY)?, load(GATE_VIEW)?, load(GATE_LANDMARKS)?], thresholds)
    }

    pub fn call_counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.calls[i].load(Ordering::Relaxed))
    }

    fn count(&self, stage: usize) {
        self.calls[stage].fetch_add(1, Ordering::Relaxed);
    }

    fn binary(&self, m: &Model, thr: f64, image: &Image) -> Result<StageOutcome> {
        let p = accept_prob(m, image)?;
        let decision = if p >= thr { Decision::Accept } else { Decision::Reject };
        Ok(StageOutcome { decision, confidence: p })
    }

    pub fn classify_modality(&self, image: &Image) -> Result<StageOutcome> {
        self.count(0);
        self.binary(&self.modality, self.thresholds.modality, image)
    }

    pub fn classify_anatomy(&self, image: &Image) -> Result<StageOutcome> {
        self.count(1);
        self.binary(&self.anatomy, self.thresholds.anatomy, image)
    }

    pub fn classify_view(&self, image: &Image) -> Result<ViewOutcome> {
        self.count(2);
        let p_lateral = accept_prob(&self.view, image)?;
        let p_ap = 1.0 - p_lateral;
        Ok(if p_ap >= self.thresholds.view {
            ViewOutcome { view: View::Ap, confidence: p_ap }
        } else {
            ViewOutcome { view: View::Lateral, confidence: p_lateral }
        })
    }

    pub fn detect_landmarks(&self, image: &Image) -> Result<LandmarkPrediction> {
        self.count(3);
        match self.landmarks.predict(image)? {
            Output::Alignment { landmarks, .. } => Ok(landmarks),
            _ => Err(CoreError::Integrity("landmark model has the wrong task".into())),
        }
    }

    /// Runs the stages in order and stops at the first rejection. On full
    /// acceptance also returns the rotation-corrected image.
    pub fn run_gate(&self, image: &Image) -> Result<(GateResult, Option<Image>)> {
        let mut r = GateResult::default();
        let m = self.classify_modality(image)?;
        r.is_xray = Some(m);
        if m.decision == Decision::Reject {
            r.rejected_at = Some(GateStage::Modality);
            return Ok((r, None));
        }
        let a = self.classify_anatomy(image)?;
        r.is_knee = Some(a);
        if a.decision == Decision::Reject {
            r.rejected_at = Some(GateStage::Anatomy);
            return Ok((r, None));
        }
        let v = self.classify_view(image)?;
        r.view = Some(v);
        if v.view != View::Ap {
            r.rejected_at = Some(GateStage::View);
            return Ok((r, None));
        }
        let lm = self.detect_landmarks(image)?;
        match rotation_angle(&lm.keypoints) {
            Ok(angle) if angle.abs() <= MAX_ROTATION_DEG => {
                r.rotation_applied = Some(angle);
                Ok((r, Some(correct_rotation(image, angle))))
            }
            _ => {
                r.rejected_at = Some(GateStage::Rotation);
                Ok((r, None))
            }
        }
    }
}

fn labeled(cfg: &TrainingConfig, id: String, img: &Image, label: u8) -> Result<Sample> {
    let (input, frame) = prepare_input(img, cfg)?;
    Ok(Sample { scan_id: id, input, target: Target { class_label: Some(label), ..Default::default() }, frame, annotations: AnnotationSet::default() })
}

fn rotated_knee(scan: &Scan, ann: &AnnotationSet, degrees: f64) -> (Image, AnnotationSet) {
    let (w, h) = (scan.image.width(), scan.image.height());
    let img = rotate(&scan.image, degrees);
    let mut a = AnnotationSet::default();
    if let Some(al) = &ann.alignment {
        a.alignment = Some(Alignment { keypoints: al.keypoints.map(|p| rotate_point(p, degrees, w, h)), ..al.clone() });
    }
    (img, a)
}

/// Builds a labeled set for one gate component from knee AP scans plus
/// seeded distractors. Positives are randomly rotated so the classifiers
/// do not depend on orientation.
pub fn gate_samples(component: &str, knees: &[(Scan, AnnotationSet)], seed: u64, max_rotation: f64) -> Result<Vec<Sample>> {
    let cfg = gate_config(component)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let size = knees.first().map(|k| k.0.image.height()).unwrap_or(256);
    let distractor = |kind: DistractorKind, i: usize| generate_distractor(kind, size, derive_seed(seed, 1_000_000 + i as u64));
    let spin = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { rng.gen_range(-max_rotation..=max_rotation) } else { 0.0 };
    use DistractorKind::*;
    for (i, (scan, ann)) in knees.iter().enumerate() {
        let theta = spin(&mut rng);
        let (img, _) = rotated_knee(scan, ann, theta);
        let id = |tag: &str| format!("{}-{tag}{i}", scan.id);
        match component {
            GATE_MODALITY => {
                out.push(labeled(&cfg, id("k"), &img, 1)?);
                let neg = if i % 2 == 0 { UniformNoise } else { Texture };
                out.push(labeled(&cfg, id("n"), &distractor(neg, i), 0)?);
                if i % 2 == 0 {
                    let pos = [Lateral, SingleBone, Chest][(i / 2) % 3];
                    out.push(labeled(&cfg, id("x"), &distractor(pos, i), 1)?);
                }
            }
            GATE_ANATOMY => {
                out.push(labeled(&cfg, id("k"), &img, 1)?);
                let neg = if i % 2 == 0 { SingleBone } else { Chest };
                out.push(labeled(&cfg, id("n"), &distractor(neg, i), 0)?);
                if i % 2 == 0 {
                    out.push(labeled(&cfg, id("l"), &distractor(Lateral, i), 1)?);
                }
            }
            GATE_VIEW => {
                out.push(labeled(&cfg, id("k"), &img, 0)?);
                out.push(labeled(&cfg, id("l"), &distractor(Lateral, i), 1)?);
            }
            GATE_LANDMARKS => {
                let theta = rng.gen_range(-max_rotation..=max_rotation);
                let (img, rot_ann) = rotated_knee(scan, ann, theta);
                let (input, frame) = prepare_input(&img, &cfg)?;
                let mut target = crate::data::build_target(&cfg, &rot_ann, &frame)?;
                if target.keypoints.is_none() {
                    return Err(CoreError::Usage(format!("{}: landmark training needs keypoint annotations", scan.id)));
                }
                target.angle = None;
                target.misaligned = None;
                out.push(Sample { scan_id: id("r"), input, target, frame, annotations: rot_ann });
            }
            other => return Err(CoreError::Usage(format!("unknown gate component {other:?}"))),
        }
    }
    Ok(out)
}

/// Trains one gate component on knees from the train split, validating on
/// a disjoint set built the same way from `val_knees`.
pub fn train_gate(component: &str, train_knees: &[(Scan, AnnotationSet)], val_knees: &[(Scan, AnnotationSet)], opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = gate_config(component)?;
    let tr = gate_samples(component, train_knees, opts.seed, 30.0)?;
    let va = gate_samples(component, val_knees, derive_seed(opts.seed, 77), 30.0)?;
    train(&cfg, &tr, &va, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(cl: (f64, f64), cr: (f64, f64), pl: (f64, f64), pr: (f64, f64)) -> KeypointSet {
        KeypointSet { femoral_condyle_left: cl, femoral_condyle_right: cr, tibial_plateau_left: pl, tibial_plateau_right: pr }
    }

    #[test]
    fn rotation_angle_examples() {
        assert_eq!(rotation_angle(&kp((0.0, 5.0), (10.0, 5.0), (0.0, 9.0), (10.0, 9.0))).unwrap(), 0.0);
        let a = rotation_angle(&kp((0.0, 0.0), (10.0, 10.0), (0.0, 5.0), (10.0, 15.0))).unwrap();
        assert!((a - 45.0).abs() < 1e-12);
        let b = rotation_angle(&kp((0.0, 0.0), (10.0, 1.0), (0.0, 5.0), (10.0, 4.0))).unwrap();
        assert!(b.abs() < 1e-12);
        assert!(rotation_angle(&kp((1.0, 1.0), (1.0, 1.0), (0.0, 5.0), (10.0, 5.0))).is_err());
    }

    #[test]
    fn zero_correction_is_identity() {
        let img = Image::from_fn(16, 16, |x, y| (x * 3 + y) as f32 / 64.0);
        assert_eq!(correct_rotation(&img, 0.0), img);
    }

    #[test]
    fn unknown_component_is_usage_error() {
        assert!(matches!(gate_config("gate_colour"), Err(CoreError::Usage(_))));
    }
}
