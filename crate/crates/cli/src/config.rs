use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kneexr_core::ingest::{PreprocessSpec, SplitSpec, StratumKey, DEFAULT_TRIAL_FRACTION};
use kneexr_core::phantom::SpecDistribution;
use kneexr_models::config::DETECTOR_IDS;
use kneexr_models::gate::GateThresholds;
use kneexr_models::{builtin_config, EnsembleSpec, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data_root: "data".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub trial_fraction: f64,
    pub strata: Vec<StratumKey>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let d = SplitSpec::default();
        SplitConfig { trial_fraction: DEFAULT_TRIAL_FRACTION, strata: d.strata }
    }
}

/// Scan-level decision rules used by `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalThresholds {
    /// A scan is narrowed when its smaller compartment width is below this (px).
    pub joint_space_px: f64,
    /// Grades at or above this count as positive.
    pub positive_grade: u8,
    pub iou: f64,
    pub misaligned_prob: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds { joint_space_px: 11.0, positive_grade: 2, iou: 0.5, misaligned_prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Detectors run by `predict`. Each needs a checkpoint.
    pub pathologies: Vec<String>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { pathologies: DETECTOR_IDS.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub epochs: u32,
    pub paths: Paths,
    pub preprocess: PreprocessSpec,
    pub split: SplitConfig,
    pub gate: GateThresholds,
    /// Partial `TrainingConfig` tables merged over the built-in recipe,
    /// keyed by pathology id.
    pub training: BTreeMap<String, serde_json::Value>,
    pub ensemble: EnsembleSpec,
    pub evaluation: EvalThresholds,
    pub phantoms: SpecDistribution,
    pub predict: PredictConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            epochs: 30,
            paths: Paths::default(),
            preprocess: PreprocessSpec::default(),
            split: SplitConfig::default(),
            gate: GateThresholds::default(),
            training: BTreeMap::new(),
            ensemble: EnsembleSpec::default(),
            evaluation: EvalThresholds::default(),
            phantoms: SpecDistribution::default(),
            predict: PredictConfig::default(),
        }
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.ensemble.validate()?;
        if self.epochs == 0 {
            return Err(CliError::Usage("epochs must be >= 1".into()));
        }
        for key in self.training.keys() {
            self.training_config(key)?;
        }
        for p in &self.predict.pathologies {
            if !DETECTOR_IDS.contains(&p.as_str()) {
                return Err(CliError::Usage(format!("predict.pathologies: unknown detector {p:?}; valid: {}", DETECTOR_IDS.join(", "))));
            }
        }
        let e = &self.evaluation;
        if !(0.0..=1.0).contains(&e.iou) || !(0.0..=1.0).contains(&e.misaligned_prob) || e.positive_grade as usize >= kneexr_core::NUM_GRADES {
            return Err(CliError::Usage("evaluation thresholds out of range".into()));
        }
        Ok(())
    }

    /// Built-in recipe for `pathology` with any `[training.<id>]` overrides.
    pub fn training_config(&self, pathology: &str) -> Result<TrainingConfig> {
        let base = builtin_config(pathology).map_err(|_| CliError::Usage(format!("training.{pathology}: not a detector; valid: {}", DETECTOR_IDS.join(", "))))?;
        let Some(patch) = self.training.get(pathology) else { return Ok(base) };
        let mut v = serde_json::to_value(&base).expect("config serializes");
        merge(&mut v, patch);
        let cfg: TrainingConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("training.{pathology}: {e}")))?;
        if cfg.pathology != pathology {
            return Err(CliError::Usage(format!("training.{pathology}: pathology field cannot be renamed")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { trial_fraction: self.split.trial_fraction, strata: self.split.strata.clone(), seed: self.seed }
    }

    /// Canonical JSON: every default made explicit, object keys sorted.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
