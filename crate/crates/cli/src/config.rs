//! The merged run configuration and its TOML form.

use std::fs;
use std::path::Path;

use bearing_core::bearingnet::ModelConfig;
use bearing_core::geogrid::MapSpec;
use bearing_core::naver::NavConfig;
use bearing_core::synthcity::DatasetConfig;
use bearing_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Pose estimator used by `navigate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Oracle,
    Noisy,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigateConfig {
    pub estimator: EstimatorKind,
    /// Position noise of the noisy estimator, meters.
    pub sigma_pos_m: f64,
    /// Heading noise of the noisy estimator, degrees.
    pub sigma_head_deg: f64,
    /// Episodes per route.
    pub seeds: usize,
    pub sim: NavConfig,
}

impl Default for NavigateConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Oracle,
            sigma_pos_m: 5.0,
            sigma_head_deg: 5.0,
            seeds: 1,
            sim: NavConfig::default(),
        }
    }
}

/// Everything a run depends on. Written as `config.toml` next to every
/// command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub navigate: NavigateConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// One 1024 m city at 1 m/px, 20 samples per block, D = 32, 20 epochs.
    Desk,
    /// Four 4096 px cities, 100 samples per block, full-size model.
    Paper,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                seed: 0,
                dataset: DatasetConfig::desk(),
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
                navigate: NavigateConfig::default(),
            },
            Preset::Paper => {
                let model = ModelConfig::paper_scale();
                let mut navigate = NavigateConfig::default();
                navigate.sim.patch_px = model.patch_px;
                Self {
                    seed: 0,
                    dataset: DatasetConfig {
                        cities: vec![1, 2, 3, 4],
                        spec: MapSpec::default(),
                        n_per_rsb: 100,
                        patch_px: model.patch_px,
                        ..DatasetConfig::desk()
                    },
                    model,
                    train: TrainConfig::default(),
                    navigate,
                }
            }
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }

    /// Pushes the global seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Desk, Preset::Paper] {
            let cfg = RunConfig::preset(p);
            let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut cfg = RunConfig::preset(Preset::Desk);
        cfg.apply_seed(17);
        assert_eq!((cfg.seed, cfg.dataset.seed, cfg.train.seed), (17, 17, 17));
    }
}
