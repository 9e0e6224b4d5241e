use std::path::PathBuf;

use bearing_core::bearingnet::TileInput;
use bearing_core::evalmetrics::{
    export_errors, mean, per_rsb_means, summarize, LocalizationRecord, LocalizationSummary, RecallRule,
};
use bearing_core::geogrid::RelCoord;
use bearing_core::numcore::Tensor;
use bearing_core::synthcity::Split;
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, write_json, LoadedDataset};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecallArg {
    /// Tile with the largest similarity weight.
    Alpha,
    /// Tile nearest to the regressed position.
    Position,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `bearing train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory written by `bearing gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "alpha")]
    recall_rule: RecallArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub checkpoint: String,
    pub split: String,
    pub recall_rule: RecallRule,
    #[serde(flatten)]
    pub summary: LocalizationSummary,
    /// Mean error of always predicting the block center, meters.
    pub center_baseline_mle: f64,
}

#[derive(Serialize)]
struct BlockRow {
    rsb_ix: usize,
    rsb_iy: usize,
    count: usize,
    mean_loc_error_m: f64,
    mean_heading_error_deg: f64,
}

pub fn run(mut cfg: RunConfig, a: EvalArgs) -> CliResult<()> {
    let (ck, id) = load_checkpoint(&a.model)?;
    let model = &ck.model;
    let ds = LoadedDataset::open(&a.data)?;
    if ds.config.patch_px != model.config.patch_px {
        return Err(CliError::Usage(format!(
            "dataset patches are {} px but the checkpoint expects {} px",
            ds.config.patch_px, model.config.patch_px
        )));
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let rule = match a.recall_rule {
        RecallArg::Alpha => RecallRule::Alpha,
        RecallArg::Position => RecallRule::Position,
    };
    let spec = ds.config.spec;
    let features: Vec<Vec<Tensor>> = (0..ds.config.cities.len())
        .map(|ci| {
            ds.city_tiles(&a.data, ci)?
                .par_iter()
                .map(|t| model.encode_value(t).map_err(CliError::from))
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<_>>()?;

    let rows: Vec<_> = ds.rows.iter().filter(|r| r.split == split).collect();
    let records = rows
        .par_iter()
        .map(|r| -> CliResult<LocalizationRecord> {
            let rsb = spec.rsb(r.rsb_ix as i64, r.rsb_iy as i64).map_err(|e| CliError::Usage(e.to_string()))?;
            let ids = spec.rsb_tiles(rsb).map_err(|e| CliError::Usage(e.to_string()))?;
            let tiles = ids.map(|t| features[r.city][t.linear(spec.tiles_per_side)].clone());
            let p = model.predict(&ds.uvp(&a.data, r)?, TileInput::Features(&tiles))?;
            if !(p.rel.x.is_finite() && p.rel.y.is_finite() && p.heading.theta.is_finite()) {
                return Err(CliError::Numeric(format!("prediction for sample {}", r.sample_id)));
            }
            let rel_true = RelCoord::new(r.rel_x, r.rel_y);
            Ok(LocalizationRecord {
                sample_id: r.sample_id,
                rsb,
                rel_pred: p.rel,
                rel_true,
                pred: spec.rel_to_world(rsb, p.rel),
                truth: spec.rel_to_world(rsb, rel_true),
                heading_pred_deg: p.heading.theta,
                heading_true_deg: r.theta_deg,
                alpha: p.alpha,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("split {} of {} is empty", split.name(), a.data.display())));
    }

    let summary = summarize(&records, rule)?;
    let center_errors: Vec<f64> = records.iter().map(|r| r.truth.dist(spec.rsb_center(r.rsb))).collect();
    let metrics = EvalMetrics {
        checkpoint: id,
        split: split.name().into(),
        recall_rule: rule,
        summary,
        center_baseline_mle: mean(&center_errors)?,
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("metrics.json"), &metrics)?;
    export_errors(&records, &a.out.join("errors.csv"))?;
    let mut w = csv::Writer::from_path(a.out.join("per_rsb.csv")).map_err(CliError::other)?;
    for (k, v) in per_rsb_means(&records) {
        w.serialize(BlockRow {
            rsb_ix: k.ix,
            rsb_iy: k.iy,
            count: v.count,
            mean_loc_error_m: v.mean_loc_error_m,
            mean_heading_error_deg: v.mean_heading_error_deg,
        })
        .map_err(CliError::other)?;
    }
    w.flush()?;
    cfg.dataset = ds.config.clone();
    cfg.model = model.config.clone();
    cfg.write(&a.out)?;
    let s = &metrics.summary;
    eprintln!(
        "{} samples: Recall@1 {:.2}%  LSR@15 {:.2}%  HSR@15 {:.2}%  MLE {:.2} m  MedLE {:.2} m  MHE {:.2}  MedHE {:.2}",
        s.count, s.recall_at_1, s.lsr15, s.hsr15, s.mle, s.medle, s.mhe, s.medhe
    );
    Ok(())
}
