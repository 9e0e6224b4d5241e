//! Synthetic city rasters and cross-view sample generation.
//!
//! A city is a seeded procedural raster. Each block of the tile grid is
//! sampled with random positions and headings; every sample pairs a
//! UAV-view patch (rotated crop with projective jitter and weather) with
//! the clean rotated satellite crop at the same pose.

mod dataset;
mod noise;
mod raster;
mod render;
mod sample;

pub use dataset::{
    assign_splits, build_dataset, city_sidecar_path, read_city_tiles, read_dataset_config, read_metadata, read_patch,
    tile_path, write_patch, CitySidecar, DatasetConfig, DatasetManifest, MetadataRow, Split,
};
pub use noise::{fbm, mix, splitmix64, value_noise};
pub use raster::{generate_city, CityRaster, ImageBuffer, SHADOW_AZIMUTH_DEG};
pub use render::{apply_weather, render_patch, AugmentConfig, Patch, View, WeatherFractions, WeatherKind};
pub use sample::{render_pose, sample_poses, sample_rsb, sampling_range, SamplePair, SamplePose};

use std::path::PathBuf;

use crate::geogrid::GeoError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("patch footprint at ({x_m:.2}, {y_m:.2}) m leaves the map")]
    OffMap { x_m: f64, y_m: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl SynthError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SynthError::Io { path: path.into(), source }
    }
}
