use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub verb: String,
    pub timestamp: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_manifest_hash: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub kneexr: String,
    pub format: u32,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self).expect("plain struct") + "\n")
    }

    pub fn artifact(&self, path: &Path) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }

    /// Re-hashes every listed artifact.
    pub fn verify(&self) -> Result<()> {
        for a in &self.artifacts {
            let now = sha256_file(&a.path)?;
            if now != a.sha256 {
                return Err(CliError::Integrity(format!("{} changed since run {} ({}): hash {} != recorded {}", a.path.display(), self.run_id, self.verb, now, a.sha256)));
            }
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Resolved configuration plus global flags for one invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    /// Relative config paths resolve against this directory.
    pub base: PathBuf,
    pub run_id: String,
    pub deterministic: bool,
    pub workers: usize,
}

impl Context {
    pub fn new(config: PipelineConfig, base: impl Into<PathBuf>) -> Self {
        let run_id = default_run_id(&config);
        Context { config, base: base.into(), run_id, deterministic: false, workers: 1 }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base.join(p) }
    }

    pub fn data_root(&self) -> PathBuf {
        self.resolve(&self.config.paths.data_root)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.resolve(&self.config.paths.checkpoints)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.reports).join(&self.run_id)
    }

    pub fn ingested_manifest(&self) -> PathBuf {
        self.data_root().join("ingested").join("manifest.jsonl")
    }

    pub fn split_dir(&self) -> PathBuf {
        self.data_root().join("split")
    }

    pub fn effective_workers(&self) -> usize {
        if self.deterministic { 1 } else { self.workers.max(1) }
    }

    pub fn run_manifest(&self, verb: &str, input: Option<&Path>, artifacts: &[PathBuf]) -> Result<RunManifest> {
        let timestamp = if self.deterministic {
            "1970-01-01T00:00:00Z".to_string()
        } else {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        };
        Ok(RunManifest {
            run_id: self.run_id.clone(),
            verb: verb.to_string(),
            timestamp,
            seed: self.config.seed,
            config_hash: self.config.hash(),
            input_manifest_hash: input.map(sha256_file).transpose()?,
            artifacts: artifacts.iter().map(|p| Ok(Artifact { path: p.clone(), sha256: sha256_file(p)? })).collect::<Result<_>>()?,
            versions: Versions { kneexr: env!("CARGO_PKG_VERSION").to_string(), format: FORMAT_VERSION },
        })
    }
}

/// Runs sharing a configuration and seed share an id unless `--run-id` is given.
pub fn default_run_id(config: &PipelineConfig) -> String {
    format!("run-s{}-{}", config.seed, &config.hash()[..10])
}
