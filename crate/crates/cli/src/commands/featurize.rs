use std::path::{Path, PathBuf};

use bearing_core::naver::{featurize_map, BENCHMARK_CITY_SEEDS};
use bearing_core::synthcity::generate_city;
use clap::Args;
use serde::Serialize;

use super::{load_checkpoint, write_json, LoadedDataset};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    /// Checkpoint written by `bearing train`.
    #[arg(long)]
    model: PathBuf,
    /// Featurize the cities of this dataset.
    #[arg(long, conflicts_with = "benchmark")]
    data: Option<PathBuf>,
    /// Featurize the navigation benchmark cities.
    #[arg(long)]
    benchmark: bool,
    /// Output directory for `city_<seed>.bftb` tables.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct TableEntry {
    city_seed: u64,
    file: String,
}

#[derive(Serialize)]
struct FeaturizeSummary {
    checkpoint: String,
    kd: usize,
    tables: Vec<TableEntry>,
}

pub fn table_path(dir: &Path, city_seed: u64) -> PathBuf {
    dir.join(format!("city_{city_seed}.bftb"))
}

pub fn run(mut cfg: RunConfig, a: FeaturizeArgs) -> CliResult<()> {
    let (ck, id) = load_checkpoint(&a.model)?;
    let seeds: Vec<u64> = match (&a.data, a.benchmark) {
        (Some(dir), false) => {
            let ds = LoadedDataset::open(dir)?;
            cfg.dataset = ds.config;
            cfg.dataset.cities.clone()
        }
        (None, true) => BENCHMARK_CITY_SEEDS.to_vec(),
        _ => return Err(CliError::Usage("pass exactly one of --data or --benchmark".into())),
    };
    cfg.model = ck.model.config.clone();
    std::fs::create_dir_all(&a.out)?;
    let mut tables = Vec::new();
    for seed in seeds {
        let city = generate_city(seed, &cfg.dataset.spec)?;
        let table = featurize_map(&city, &ck)?;
        let path = table_path(&a.out, seed);
        table.save(&path)?;
        eprintln!("wrote {}", path.display());
        tables
            .push(TableEntry { city_seed: seed, file: path.file_name().expect("file name").to_string_lossy().into() });
    }
    write_json(&a.out.join("featurize.json"), &FeaturizeSummary { checkpoint: id, kd: ck.model.config.kd(), tables })?;
    cfg.write(&a.out)?;
    Ok(())
}
