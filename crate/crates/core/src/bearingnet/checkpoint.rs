//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"BCKP"
//! 4       4     header length N, u32 little-endian
//! 8       N     UTF-8 JSON header: {"version", "seed", "config", "params": [{"name", "shape"}]}
//! 8+N     ...   parameter values as little-endian f64, concatenated in header order
//! ```
//!
//! A checkpoint's id is the hex SHA-256 of the whole file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ModelError, ModelParams};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"BCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.model.config.clone(),
            params: self
                .model
                .params
                .entries
                .iter()
                .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.model.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params.entries {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let json = bytes.get(8..8 + n).ok_or("truncated header")?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| format!("bad header: {e}"))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {}", header.version));
        }
        let mut at = 8 + n;
        let mut named = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let count: usize = p.shape.iter().product();
            let raw = bytes.get(at..at + 8 * count).ok_or_else(|| format!("truncated data for {}", p.name))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            named.push((p.name.clone(), Tensor::new(&p.shape, data).map_err(|e| e.to_string())?));
            at += 8 * count;
        }
        if at != bytes.len() {
            return Err("trailing bytes after parameter data".into());
        }
        let params = ModelParams::from_named(&header.config, named).map_err(|e| e.to_string())?;
        Ok(Self { model: Model { config: header.config, params }, seed: header.seed })
    }

    /// Writes the file and returns its id.
    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Reads a checkpoint and its id.
    pub fn load(path: &Path) -> Result<(Self, String), ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
        let ck = Self::from_bytes(&bytes).map_err(|msg| ModelError::Format { path: path.to_path_buf(), msg })?;
        Ok((ck, hex::encode(Sha256::digest(&bytes))))
    }

    pub fn id(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}
