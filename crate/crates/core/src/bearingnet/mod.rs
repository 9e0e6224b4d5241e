//! The position and heading regression network.
//!
//! A UAV patch and the four tiles of a block are encoded by one shared
//! encoder (conv backbone, non-local block, cluster aggregation) into
//! unit descriptors. Tile descriptors receive learned coordinate
//! embeddings; the UAV descriptor attends over them and is compared to
//! them by cosine similarity to form a soft coordinate. Two MLP heads
//! regress the relative position and a heading vector from the fused
//! vector `(u, f, q)`.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Toggles};
pub use forward::{
    prediction_from, tile_centers, Bound, ForwardTrace, ForwardVars, Prediction, TileInput, INPUT_MEAN, LAMBDA_HEADING,
    LAMBDA_POS, SMOOTH_L1_BETA,
};
pub use params::{param_shapes, Layout, ModelParams, Param};

use std::path::PathBuf;

use rand::Rng;

use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests;
