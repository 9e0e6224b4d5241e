use std::path::{Path, PathBuf};

use bearing_core::bearingnet::{Checkpoint, Model};
use bearing_core::geogrid::{Heading, RelCoord};
use bearing_core::synthcity::{mix, Split};
use bearing_core::trainer::{train, write_history, TrainSample, TrainSet};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{write_json, LoadedDataset};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::AblationArgs;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `bearing gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    ablation: AblationArgs,
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    best_epoch: usize,
    best_val_loss: f64,
    train_samples: usize,
    val_samples: usize,
}

/// Train and validation sets of a generated dataset. Tiles of city `c`
/// start at `c · tiles²` in each set.
pub fn load_sets(data: &Path, ds: &LoadedDataset) -> CliResult<(TrainSet, TrainSet)> {
    let spec = &ds.config.spec;
    let per_city = spec.tiles_per_side * spec.tiles_per_side;
    let mut tiles = Vec::with_capacity(per_city * ds.config.cities.len());
    for ci in 0..ds.config.cities.len() {
        tiles.extend(ds.city_tiles(data, ci)?);
    }
    let wanted: Vec<_> = ds.rows.iter().filter(|r| matches!(r.split, Split::Train | Split::Val)).collect();
    let samples = wanted
        .par_iter()
        .map(|r| -> CliResult<(Split, TrainSample)> {
            let rsb = spec.rsb(r.rsb_ix as i64, r.rsb_iy as i64).map_err(|e| CliError::Usage(e.to_string()))?;
            let ids = spec.rsb_tiles(rsb).map_err(|e| CliError::Usage(e.to_string()))?;
            let s = TrainSample {
                uvp: ds.uvp(data, r)?,
                tiles: ids.map(|t| r.city * per_city + t.linear(spec.tiles_per_side)),
                rel: RelCoord::new(r.rel_x, r.rel_y),
                heading: Heading::from_degrees(r.theta_deg),
            };
            Ok((r.split, s))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut train_set = TrainSet { tiles: tiles.clone(), samples: Vec::new() };
    let mut val_set = TrainSet { tiles, samples: Vec::new() };
    for (split, s) in samples {
        match split {
            Split::Train => train_set.samples.push(s),
            _ => val_set.samples.push(s),
        }
    }
    Ok((train_set, val_set))
}

pub fn run(mut cfg: RunConfig, a: TrainArgs) -> CliResult<()> {
    a.ablation.apply(&mut cfg);
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    let ds = LoadedDataset::open(&a.data)?;
    if ds.config.patch_px != cfg.model.patch_px {
        return Err(CliError::Usage(format!(
            "dataset patches are {} px but the model expects {} px",
            ds.config.patch_px, cfg.model.patch_px
        )));
    }
    cfg.dataset = ds.config.clone();
    cfg.train.validate()?;
    let (train_set, val_set) = load_sets(&a.data, &ds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x1417]));
    let mut model = Model::new(cfg.model.clone(), &mut rng)?;
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, |r| {
        eprintln!("epoch {:>3}  train {:.6}  val {:.6}  lr {:.2e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    })?;

    std::fs::create_dir_all(&a.out)?;
    let ck = Checkpoint { model: outcome.best, seed: cfg.seed };
    let id = ck.save(&a.out.join("model.ckpt"))?;
    write_history(&a.out.join("history.csv"), &outcome.history)?;
    write_json(
        &a.out.join("train.json"),
        &TrainSummary {
            checkpoint: id,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            train_samples: train_set.len(),
            val_samples: val_set.len(),
        },
    )?;
    cfg.write(&a.out)?;
    eprintln!(
        "best epoch {} (val {:.6}); wrote {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        a.out.join("model.ckpt").display()
    );
    Ok(())
}
