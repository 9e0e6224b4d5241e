//! One module per subcommand.

pub mod eval;
pub mod featurize;
pub mod gen;
pub mod navigate;
pub mod report;
pub mod train;

use std::fs;
use std::path::Path;

use bearing_core::bearingnet::Checkpoint;
use bearing_core::numcore::Tensor;
use bearing_core::synthcity::{read_city_tiles, read_dataset_config, read_metadata, DatasetConfig, MetadataRow};
use serde::Serialize;

use crate::error::{require, CliError, CliResult};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::other)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str, producer: &str) -> CliResult<T> {
    require(path, what, producer)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// A generated dataset read back from disk.
pub struct LoadedDataset {
    pub config: DatasetConfig,
    pub rows: Vec<MetadataRow>,
}

impl LoadedDataset {
    pub fn open(dir: &Path) -> CliResult<Self> {
        require(&dir.join("dataset.json"), "dataset config", "bearing gen")?;
        let meta = dir.join("metadata.csv");
        require(&meta, "dataset metadata", "bearing gen")?;
        Ok(Self { config: read_dataset_config(dir)?, rows: read_metadata(&meta)? })
    }

    /// Every tile of city `ci` as a tensor, in linear tile order.
    pub fn city_tiles(&self, dir: &Path, ci: usize) -> CliResult<Vec<Tensor>> {
        let first = bearing_core::synthcity::tile_path(dir, ci, bearing_core::geogrid::TileId { ix: 0, iy: 0 });
        require(&first, "city tiles", "bearing gen (without --metadata-only)")?;
        Ok(read_city_tiles(dir, ci, &self.config.spec)?.iter().map(|p| p.to_tensor()).collect())
    }

    pub fn uvp(&self, dir: &Path, row: &MetadataRow) -> CliResult<Tensor> {
        let path = dir.join(&row.uvp_path);
        require(&path, "camera patch", "bearing gen (without --metadata-only)")?;
        Ok(bearing_core::synthcity::read_patch(&path)?.to_tensor())
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, String)> {
    require(path, "model checkpoint", "bearing train")?;
    Ok(Checkpoint::load(path)?)
}
