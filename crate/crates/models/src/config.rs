use kneexr_core::{CoreError, PathologyId, Result};
use kneexr_nn::{LrSchedule, OptimizerKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Detection,
    Segmentation,
    KeypointClassification,
    Classification,
}

/// Loss composition per task. Weights multiply the secondary term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Mse,
    /// Anchor objectness by balanced BCE plus smooth-L1 box deltas.
    ClassBox { box_weight: f64, beta: f64 },
    /// Anchor objectness by focal loss plus smooth-L1 box deltas.
    FocalBox { gamma: f64, alpha: f64, box_weight: f64, beta: f64 },
    /// Per-pixel mask BCE plus smooth-L1 on the normalized box.
    MaskBceBox { box_weight: f64, beta: f64 },
    DiceBce { bce_weight: f64 },
    /// Angle MSE plus misalignment BCE, with landmark MSE on the keypoint layer.
    MseBce { bce_weight: f64, keypoint_weight: f64 },
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Side of the square anchor of each scale, in `input_size` pixels.
    pub scales: Vec<f64>,
    /// Height-to-width ratios.
    pub ratios: Vec<f64>,
}

/// Region of the raw image fed to the model, as fractions of its size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub center: (f64, f64),
    pub size: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub prob: f64,
    pub rotation_deg: f64,
    pub flip: bool,
    pub brightness: f64,
    pub scale: f64,
    /// Peak displacement of a smooth random warp, in model pixels.
    pub elastic: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation::none()
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation { prob: 0.0, rotation_deg: 0.0, flip: false, brightness: 0.0, scale: 0.0, elastic: 0.0 }
    }

    pub fn standard() -> Self {
        Augmentation { prob: 0.5, rotation_deg: 10.0, flip: true, brightness: 0.2, scale: 0.0, elastic: 0.0 }
    }

    pub fn is_none(&self) -> bool {
        self.prob == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub pathology: String,
    pub task: Task,
    pub input_size: (usize, usize),
    /// Resolution the network actually sees; recipes keep their nominal
    /// `input_size` and anchor scales are converted between the two.
    pub model_size: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<Crop>,
    pub loss: LossSpec,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorSpec>,
    #[serde(default)]
    pub augmentation: Augmentation,
    /// Base channel count of the convolutional trunk.
    pub width: usize,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_threshold")]
    pub nms_iou: f64,
    /// Output classes of a classification task.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    kneexr_core::NUM_GRADES
}

fn default_threshold() -> f64 {
    0.5
}

fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Spec(format!("{}: {m}", self.pathology)));
        if !self.lr_schedule.is_valid() {
            return bad(format!("invalid learning-rate schedule {:?}", self.lr_schedule));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let (mh, mw) = self.model_size;
        if mh < 16 || mw < 16 || mh % 8 != 0 || mw % 8 != 0 {
            return bad(format!("model_size {mh}x{mw} must be multiples of 8 and at least 16"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 || self.width == 0 {
            return bad("input_size and width must be positive".into());
        }
        if let Some(r) = self.dropout_rate {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("dropout_rate {r} outside [0, 1)"));
            }
        }
        if let Some(c) = self.crop {
            let ok = c.size.0 > 0.0 && c.size.1 > 0.0 && c.size.0 <= 1.0 && c.size.1 <= 1.0;
            if !ok {
                return bad("crop size must lie in (0, 1]".into());
            }
        }
        match (self.task, &self.anchors) {
            (Task::Detection, None) => return bad("detection requires anchors".into()),
            (Task::Detection, Some(a)) if a.scales.is_empty() || a.ratios.is_empty() => {
                return bad("anchor scales and ratios must be non-empty".into())
            }
            (Task::Detection, Some(a)) if a.scales.iter().chain(&a.ratios).any(|v| *v <= 0.0) => {
                return bad("anchor scales and ratios must be positive".into())
            }
            _ => {}
        }
        if self.task == Task::Classification && self.num_classes < 2 {
            return bad("classification needs at least two classes".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Model pixels per `input_size` pixel, per axis `(x, y)`.
    pub fn input_to_model(&self) -> (f64, f64) {
        (self.model_size.1 as f64 / self.input_size.1 as f64, self.model_size.0 as f64 / self.input_size.0 as f64)
    }
}

pub const DETECTOR_IDS: [&str; 7] = ["joint_space", "sclerosis", "osteophytes", "postop", "alignment", "soft_tissue", "tibial_spike"];

fn ratios3() -> Vec<f64> {
    vec![1.0, 0.5, 2.0]
}

/// The per-pathology training recipes.
pub fn builtin_config(pathology: &str) -> Result<TrainingConfig> {
    let id: PathologyId = pathology.parse().map_err(CoreError::Usage)?;
    let base = |task, input_size, model_size, loss, batch_size, lr_schedule| TrainingConfig {
        pathology: id.as_str().to_string(),
        task,
        input_size,
        model_size,
        crop: None,
        loss,
        optimizer: adam(),
        lr_schedule,
        batch_size,
        dropout_rate: None,
        anchors: None,
        augmentation: Augmentation::none(),
        width: 8,
        score_threshold: 0.5,
        nms_iou: 0.5,
        num_classes: kneexr_core::NUM_GRADES,
    };
    let cfg = match id {
        PathologyId::JointSpace => TrainingConfig {
            crop: Some(Crop { center: (0.5, 0.5), size: (0.5, 0.5) }),
            dropout_rate: Some(0.5),
            ..base(Task::Regression, (256, 256), (128, 128), LossSpec::Mse, 32, LrSchedule::StepDecay { base: 0.001, factor: 0.1, period_epochs: 10 })
        },
        PathologyId::Sclerosis => TrainingConfig {
            crop: Some(Crop { center: (0.5, 0.5), size: (0.5, 0.5) }),
            anchors: Some(AnchorSpec { scales: vec![32.0, 64.0, 128.0], ratios: ratios3() }),
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            ..base(Task::Detection, (512, 512), (128, 128), LossSpec::ClassBox { box_weight: 1.0, beta: 1.0 }, 16, LrSchedule::constant(0.01))
        },
        PathologyId::Osteophytes => TrainingConfig {
            anchors: Some(AnchorSpec { scales: vec![16.0, 32.0, 64.0], ratios: ratios3() }),
            ..base(
                Task::Detection,
                (320, 320),
                (160, 160),
                LossSpec::FocalBox { gamma: 2.0, alpha: 0.25, box_weight: 1.0, beta: 1.0 },
                32,
                LrSchedule::Cyclical { min: 1e-4, max: 1e-2, period_iters: 200 },
            )
        },
        PathologyId::Postop => base(
            Task::Segmentation,
            (256, 256),
            (64, 64),
            LossSpec::MaskBceBox { box_weight: 1.0, beta: 1.0 },
            8,
            LrSchedule::StepDecay { base: 0.002, factor: 0.1, period_epochs: 15 },
        ),
        PathologyId::Alignment => TrainingConfig {
            augmentation: Augmentation { prob: 0.5, rotation_deg: 10.0, flip: false, brightness: 0.0, scale: 0.1, elastic: 0.0 },
            ..base(
                Task::KeypointClassification,
                (512, 512),
                (64, 64),
                LossSpec::MseBce { bce_weight: 1.0, keypoint_weight: 1.0 },
                16,
                LrSchedule::constant(0.001),
            )
        },
        PathologyId::SoftTissue => TrainingConfig {
            augmentation: Augmentation { prob: 0.5, rotation_deg: 10.0, flip: true, brightness: 0.2, scale: 0.0, elastic: 1.5 },
            ..base(
                Task::Segmentation,
                (256, 256),
                (64, 64),
                LossSpec::DiceBce { bce_weight: 1.0 },
                16,
                LrSchedule::StepDecay { base: 0.002, factor: 0.1, period_epochs: 12 },
            )
        },
        PathologyId::TibialSpike => TrainingConfig {
            crop: Some(Crop { center: (0.5, 0.5), size: (0.25, 0.25) }),
            width: 16,
            anchors: Some(AnchorSpec { scales: vec![16.0, 32.0, 64.0], ratios: vec![1.0, 2.0] }),
            ..base(
                Task::Detection,
                (256, 256),
                (64, 64),
                LossSpec::FocalBox { gamma: 2.0, alpha: 0.25, box_weight: 1.0, beta: 1.0 },
                32,
                LrSchedule::constant(0.0005),
            )
        },
        PathologyId::Grading => {
            return Err(CoreError::Usage("grading is trained through the ensemble, not as a detector".into()));
        }
    };
    Ok(cfg)
}

/// Recipe shared by the three grading members; `width` sets the capacity tier.
pub fn grading_config(width: usize) -> TrainingConfig {
    TrainingConfig {
        pathology: PathologyId::Grading.as_str().to_string(),
        task: Task::Classification,
        input_size: (512, 512),
        model_size: (128, 128),
        crop: Some(Crop { center: (0.5, 0.5), size: (0.5, 0.5) }),
        loss: LossSpec::CrossEntropy,
        optimizer: OptimizerKind::AdamW { weight_decay: 0.01 },
        lr_schedule: LrSchedule::StepDecay { base: 0.001, factor: 0.1, period_epochs: 10 },
        batch_size: 32,
        dropout_rate: None,
        anchors: None,
        augmentation: Augmentation::standard(),
        width,
        score_threshold: 0.5,
        nms_iou: 0.5,
        num_classes: kneexr_core::NUM_GRADES,
    }
}
