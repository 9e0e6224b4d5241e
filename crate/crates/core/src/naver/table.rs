//! Precomputed per-tile descriptors.
//!
//! ```text
//! offset   size      field
//! 0        4         magic b"BFTB"
//! 4        2         tiles along x, u16 little-endian
//! 6        2         tiles along y, u16 little-endian
//! 8        4         vector length L, u32 little-endian
//! 12       4·L·N     f32 little-endian vectors in tile-linear order
//! end-32   32        SHA-256 id of the source checkpoint
//! ```

use std::fs;
use std::path::Path;

use super::NavError;
use crate::bearingnet::{Checkpoint, Model};
use crate::geogrid::{MapSpec, RsbIndex};
use crate::numcore::Tensor;
use crate::synthcity::CityRaster;
use crate::trainer::city_tile_tensors;

const MAGIC: &[u8; 4] = b"BFTB";

/// One unit descriptor per map tile, indexed by `TileId::linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub tiles_per_side: usize,
    pub kd: usize,
    pub vectors: Vec<Tensor>,
    pub checkpoint_id: [u8; 32],
}

impl FeatureTable {
    /// Identical unit rows, for estimators that never read features.
    pub fn placeholder(tiles_per_side: usize) -> Self {
        let row = Tensor::new(&[1], vec![1.0]).expect("length-1 vector");
        Self { tiles_per_side, kd: 1, vectors: vec![row; tiles_per_side * tiles_per_side], checkpoint_id: [0; 32] }
    }

    /// The four descriptors of `rsb`, in tile-center order.
    pub fn block_rows(&self, spec: &MapSpec, rsb: RsbIndex) -> Result<[Tensor; 4], NavError> {
        if spec.tiles_per_side != self.tiles_per_side {
            return Err(NavError::Config(format!(
                "table covers {} tiles per side, map has {}",
                self.tiles_per_side, spec.tiles_per_side
            )));
        }
        let ids = spec.rsb_tiles(rsb)?;
        Ok(ids.map(|t| self.vectors[t.linear(self.tiles_per_side)].clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let side = self.tiles_per_side as u16;
        let mut out = Vec::with_capacity(12 + 4 * self.kd * self.vectors.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&side.to_le_bytes());
        out.extend_from_slice(&side.to_le_bytes());
        out.extend_from_slice(&(self.kd as u32).to_le_bytes());
        for v in &self.vectors {
            for x in v.data() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.checkpoint_id);
        out
    }

    /// Parses a table; vectors come back rounded to f32 precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
            return Err("not a feature table".into());
        }
        let nx = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let ny = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let kd = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if nx != ny {
            return Err(format!("non-square tile grid {nx}x{ny}"));
        }
        let body = 4 * kd * nx * ny;
        if bytes.len() != 12 + body + 32 {
            return Err(format!("expected {} bytes, found {}", 12 + body + 32, bytes.len()));
        }
        let vectors = bytes[12..12 + body]
            .chunks_exact(4 * kd.max(1))
            .map(|chunk| {
                let data =
                    chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
                Tensor::new(&[kd], data).expect("kd values")
            })
            .collect();
        let checkpoint_id = bytes[12 + body..].try_into().expect("32 bytes");
        Ok(Self { tiles_per_side: nx, kd, vectors, checkpoint_id })
    }

    pub fn save(&self, path: &Path) -> Result<(), NavError> {
        fs::write(path, self.to_bytes()).map_err(|e| NavError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NavError> {
        let bytes = fs::read(path).map_err(|e| NavError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| NavError::Format(format!("{}: {e}", path.display())))
    }
}

/// Encodes every tile of `city` with `model`.
pub fn featurize_with(city: &CityRaster, model: &Model, checkpoint_id: [u8; 32]) -> Result<FeatureTable, NavError> {
    let cfg = &model.config;
    let n = city.spec.rst_px();
    if cfg.feature_side(n).is_none() {
        return Err(NavError::Config(format!("{n} px tiles are too small for the model backbone")));
    }
    if city.spec.tiles_per_side > u16::MAX as usize {
        return Err(NavError::Config("tile grid too large for the table format".into()));
    }
    let vectors = city_tile_tensors(city).iter().map(|t| model.encode_value(t)).collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureTable { tiles_per_side: city.spec.tiles_per_side, kd: cfg.kd(), vectors, checkpoint_id })
}

/// Encodes every tile of `city` with the checkpoint's model.
pub fn featurize_map(city: &CityRaster, checkpoint: &Checkpoint) -> Result<FeatureTable, NavError> {
    featurize_with(city, &checkpoint.model, checkpoint.id())
}
