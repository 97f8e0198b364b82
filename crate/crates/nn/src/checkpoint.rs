//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "KXRCKPT\0"
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON {"arch": .., "meta": ..}
//! count      u64      number of f32 parameters
//! params     count × f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{ArchSpec, Network};

const MAGIC: &[u8; 8] = b"KXRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    meta: serde_json::Value,
}

/// Weights plus an architecture and a free-form metadata echo (typically the
/// training configuration that produced them).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub meta: serde_json::Value,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: serde_json::Value) -> Self {
        Checkpoint { arch: net.arch().clone(), meta, params: net.params() }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_params(self.arch.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { arch: self.arch.clone(), meta: self.meta.clone() })
            .expect("header is plain data");
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NnError::Integrity(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(NnError::Integrity(format!("unsupported checkpoint format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e + 8 <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| NnError::Integrity(format!("header: {e}")))?;
        let count = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap()) as usize;
        let body = &bytes[hend + 8..];
        if body.len() != count * 4 {
            return Err(NnError::Integrity(format!("expected {} parameter bytes, found {}", count * 4, body.len())));
        }
        let params = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let ckpt = Checkpoint { arch: header.arch, meta: header.meta, params };
        // Validate that the weights fit the architecture.
        ckpt.network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| NnError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| NnError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
