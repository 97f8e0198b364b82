//! Severity grading by three classifier members fused with weighted averaging.

use std::path::{Path, PathBuf};

use kneexr_core::ingest::DatasetManifest;
use kneexr_core::{argmax_low, CoreError, Image, Result, NUM_GRADES};
use serde::{Deserialize, Serialize};

use crate::config::{grading_config, TrainingConfig};
use crate::data::load_labeled;
use crate::detect::{prepare_all, train, Model, Output, TrainOptions, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub name: String,
    /// Base channel count of the member's convolutional trunk.
    pub width: usize,
}

impl MemberSpec {
    pub fn config(&self) -> TrainingConfig {
        grading_config(self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
    pub weights: Vec<f64>,
    pub input_size: (usize, usize),
    pub num_grades: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        let m = |name: &str, width| MemberSpec { name: name.into(), width };
        EnsembleSpec {
            members: vec![m("d121", 4), m("d169", 6), m("d201", 8)],
            weights: vec![1.0 / 3.0; 3],
            input_size: (512, 512),
            num_grades: NUM_GRADES,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members.len() != 3 || self.weights.len() != 3 {
            return Err(CoreError::Spec(format!("ensemble needs 3 members and 3 weights, got {} and {}", self.members.len(), self.weights.len())));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::Spec("ensemble weights must be finite and non-negative".into()));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(CoreError::Spec("ensemble weights must sum to 1".into()));
        }
        if self.num_grades != NUM_GRADES || self.input_size != (512, 512) {
            return Err(CoreError::Spec(format!("ensemble fixes {NUM_GRADES} grades at 512x512 input")));
        }
        let mut names: Vec<&str> = self.members.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != 3 {
            return Err(CoreError::Spec("member names must be distinct".into()));
        }
        for m in &self.members {
            m.config().validate()?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, dir: &Path, member: &MemberSpec) -> PathBuf {
        dir.join(format!("grading_{}.ckpt", member.name))
    }
}

/// Weighted mean of member distributions. Weights are normalized first and
/// the result is renormalized to sum to one.
pub fn fuse(members: &[[f64; NUM_GRADES]], weights: &[f64]) -> Result<[f64; NUM_GRADES]> {
    if members.len() != weights.len() || members.is_empty() {
        return Err(CoreError::Usage(format!("{} member vectors for {} weights", members.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(CoreError::Usage(format!("negative or non-finite ensemble weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::Usage("ensemble weights sum to zero".into()));
    }
    let mut fused = [0.0; NUM_GRADES];
    for (p, w) in members.iter().zip(weights) {
        for (f, v) in fused.iter_mut().zip(p) {
            *f += w / total * v;
        }
    }
    let s: f64 = fused.iter().sum();
    if s > 0.0 {
        fused.iter_mut().for_each(|f| *f /= s);
    }
    Ok(fused)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradePrediction {
    pub members: Vec<[f64; NUM_GRADES]>,
    pub fused: [f64; NUM_GRADES],
    pub grade: u8,
    pub confidence: f64,
}

impl GradePrediction {
    pub fn from_members(members: Vec<[f64; NUM_GRADES]>, weights: &[f64]) -> Result<Self> {
        let fused = fuse(&members, weights)?;
        let grade = argmax_low(&fused);
        Ok(GradePrediction { members, fused, grade: grade as u8, confidence: fused[grade] })
    }
}

/// Trains one member on a grade-labeled manifest.
pub fn train_member(member: &MemberSpec, train_manifest: &DatasetManifest, val_manifest: &DatasetManifest, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = member.config();
    let load = |m: &DatasetManifest| -> Result<_> {
        let data = load_labeled(m)?;
        if let Some((s, _)) = data.iter().find(|(_, a)| a.oa_grade.is_none()) {
            return Err(CoreError::Usage(format!("scan {} has no oa_grade; grading needs graded entries", s.id)));
        }
        prepare_all(&cfg, &data)
    };
    let (tr, va) = (load(train_manifest)?, load(val_manifest)?);
    let mut out = train(&cfg, &tr, &va, opts)?;
    out.model.config.pathology = cfg.pathology.clone();
    Ok(out)
}

#[derive(Debug)]
pub struct Ensemble {
    pub spec: EnsembleSpec,
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn new(spec: EnsembleSpec, members: Vec<Model>) -> Result<Self> {
        spec.validate()?;
        if members.len() != spec.members.len() {
            return Err(CoreError::Integrity(format!("{} checkpoints for {} ensemble members", members.len(), spec.members.len())));
        }
        for (m, s) in members.iter().zip(&spec.members) {
            if m.config.task != crate::config::Task::Classification || m.config.num_classes != spec.num_grades || m.config.width != s.width {
                return Err(CoreError::Integrity(format!("checkpoint for member {} does not match its spec", s.name)));
            }
        }
        Ok(Ensemble { spec, members })
    }

    pub fn load(spec: EnsembleSpec, dir: &Path) -> Result<Self> {
        spec.validate()?;
        let mut members = Vec::new();
        for m in &spec.members {
            let path = spec.checkpoint_path(dir, m);
            if !path.exists() {
                return Err(CoreError::Integrity(format!("missing checkpoint for ensemble member {} at {}", m.name, path.display())));
            }
            members.push(Model::load(&path, Some("grading"))?);
        }
        Self::new(spec, members)
    }

    pub fn member_probs(&self, image: &Image) -> Result<Vec<[f64; NUM_GRADES]>> {
        self.members
            .iter()
            .map(|m| match m.predict(image)? {
                Output::Classes(p) if p.len() == NUM_GRADES => Ok([p[0], p[1], p[2], p[3]]),
                _ => Err(CoreError::Integrity(format!("{} did not produce {NUM_GRADES} grade probabilities", m.component()))),
            })
            .collect()
    }

    pub fn predict(&self, image: &Image) -> Result<GradePrediction> {
        GradePrediction::from_members(self.member_probs(image)?, &self.spec.weights)
    }
}
