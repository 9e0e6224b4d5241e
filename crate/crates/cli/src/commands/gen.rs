use std::path::PathBuf;

use bearing_core::synthcity::{build_dataset, WeatherFractions};
use clap::{Args, ValueEnum};

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeatherMix {
    /// Normal weather only.
    None,
    /// Illumination, fog, rain and snow at 20% each.
    FourWay,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of cities; city seeds are 1..=N.
    #[arg(long)]
    cities: Option<usize>,
    /// Samples per reference satellite block.
    #[arg(long)]
    per_rsb: Option<usize>,
    /// Map side in pixels.
    #[arg(long)]
    map_px: Option<usize>,
    /// Tiles per map side.
    #[arg(long)]
    tiles: Option<usize>,
    #[arg(long)]
    meters_per_px: Option<f64>,
    /// Camera patch side in pixels.
    #[arg(long)]
    patch_px: Option<usize>,
    /// Camera-view weather distribution.
    #[arg(long, value_enum)]
    weather: Option<WeatherMix>,
    /// Write metadata only, skipping all images.
    #[arg(long)]
    metadata_only: bool,
}

pub fn run(mut cfg: RunConfig, a: GenArgs) -> CliResult<()> {
    let d = &mut cfg.dataset;
    if let Some(n) = a.cities {
        d.cities = (1..=n as u64).collect();
    }
    if let Some(v) = a.per_rsb {
        d.n_per_rsb = v;
    }
    if let Some(v) = a.map_px {
        d.spec.size_px = v;
    }
    if let Some(v) = a.tiles {
        d.spec.tiles_per_side = v;
    }
    if let Some(v) = a.meters_per_px {
        d.spec.meters_per_px = v;
    }
    if let Some(v) = a.patch_px {
        d.patch_px = v;
        cfg.model.patch_px = v;
        cfg.navigate.sim.patch_px = v;
    }
    match a.weather {
        Some(WeatherMix::None) => d.aug.weather = WeatherFractions::default(),
        Some(WeatherMix::FourWay) => d.aug.weather = WeatherFractions::four_way(),
        None => {}
    }
    let manifest = build_dataset(&cfg.dataset, &a.out, a.metadata_only)?;
    cfg.write(&a.out)?;
    eprintln!(
        "wrote {} samples ({} train, {} val, {} test) to {}",
        manifest.rows,
        manifest.train,
        manifest.val,
        manifest.test,
        a.out.display()
    );
    Ok(())
}
