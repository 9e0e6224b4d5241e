use std::collections::BTreeMap;
use std::path::PathBuf;

use bearing_core::evalmetrics::{export_episodes, summarize_navigation, NavigationSummary};
use bearing_core::naver::{
    benchmark_routes, featurize_map, run_route, write_routes, write_trajectory, BenchmarkRoute, FeatureTable,
    ModelEstimator, NoisyEstimator, OracleEstimator, PoseEstimator, World,
};
use bearing_core::synthcity::{generate_city, mix, CityRaster};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::featurize::table_path;
use super::{load_checkpoint, write_json};
use crate::config::{EstimatorKind, RunConfig};
use crate::error::{require, CliError, CliResult};

#[derive(Args, Debug)]
pub struct NavigateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `all`, or a comma-separated list of route ids such as `route_0,route_3`.
    #[arg(long, default_value = "all")]
    routes: String,
    /// Episodes per route.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorKind>,
    /// Checkpoint for the model estimator.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of tables from `bearing featurize --benchmark`; computed
    /// in-process when omitted.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Position noise of the noisy estimator, meters.
    #[arg(long)]
    sigma_pos: Option<f64>,
    /// Heading noise of the noisy estimator, degrees.
    #[arg(long)]
    sigma_head: Option<f64>,
    /// Per-step heading drift, degrees.
    #[arg(long)]
    drift: Option<f64>,
}

/// Summary of one route's episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSummary {
    pub route_id: String,
    pub city_seed: u64,
    pub length_m: f64,
    #[serde(flatten)]
    pub metrics: NavigationSummary,
}

/// Contents of `nav_metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    pub estimator: EstimatorKind,
    #[serde(flatten)]
    pub overall: NavigationSummary,
    pub routes: Vec<RouteSummary>,
}

fn select_routes(all: Vec<BenchmarkRoute>, spec: &str) -> CliResult<Vec<(usize, BenchmarkRoute)>> {
    if spec == "all" {
        return Ok(all.into_iter().enumerate().collect());
    }
    let mut out = Vec::new();
    for id in spec.split(',').map(str::trim) {
        let i = all.iter().position(|r| r.route.route_id == id).ok_or_else(|| {
            CliError::Usage(format!("unknown route {id:?}; ids are route_0 to route_{}", all.len() - 1))
        })?;
        if out.iter().any(|(j, _)| *j == i) {
            return Err(CliError::Usage(format!("route {id} listed twice")));
        }
        out.push((i, all[i].clone()));
    }
    Ok(out)
}

pub fn run(mut cfg: RunConfig, a: NavigateArgs) -> CliResult<()> {
    let nav = &mut cfg.navigate;
    if let Some(v) = a.seeds {
        nav.seeds = v;
    }
    if let Some(v) = a.estimator {
        nav.estimator = v;
    }
    if let Some(v) = a.sigma_pos {
        nav.sigma_pos_m = v;
    }
    if let Some(v) = a.sigma_head {
        nav.sigma_head_deg = v;
    }
    if let Some(v) = a.drift {
        nav.sim.drift_sigma_deg = v;
    }
    if nav.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if !(nav.sigma_pos_m >= 0.0 && nav.sigma_head_deg >= 0.0) {
        return Err(CliError::Usage("noise levels must be non-negative".into()));
    }
    let spec = cfg.dataset.spec;
    let routes = select_routes(benchmark_routes(&spec)?, &a.routes)?;

    let checkpoint = match (nav.estimator, &a.model) {
        (EstimatorKind::Model, Some(p)) => Some(load_checkpoint(p)?.0),
        (EstimatorKind::Model, None) => return Err(CliError::Usage("the model estimator needs --model".into())),
        _ => None,
    };
    if let Some(ck) = &checkpoint {
        nav.sim.patch_px = ck.model.config.patch_px;
        cfg.model = ck.model.config.clone();
    }
    cfg.navigate.sim.validate()?;

    let mut cities: BTreeMap<u64, (CityRaster, FeatureTable)> = BTreeMap::new();
    for (_, r) in &routes {
        if cities.contains_key(&r.city_seed) {
            continue;
        }
        let city = generate_city(r.city_seed, &spec)?;
        let table = match (&checkpoint, &a.tables) {
            (None, _) => FeatureTable::placeholder(spec.tiles_per_side),
            (Some(ck), Some(dir)) => {
                let path = table_path(dir, r.city_seed);
                require(&path, "feature table", "bearing featurize --benchmark")?;
                let t = FeatureTable::load(&path)?;
                if t.checkpoint_id != ck.id() {
                    return Err(CliError::Usage(format!("{} was built from a different checkpoint", path.display())));
                }
                t
            }
            (Some(ck), None) => featurize_map(&city, ck)?,
        };
        cities.insert(r.city_seed, (city, table));
    }

    let estimator: Box<dyn PoseEstimator> = match (&checkpoint, cfg.navigate.estimator) {
        (Some(ck), _) => Box::new(ModelEstimator(ck.model.clone())),
        (None, EstimatorKind::Noisy) => Box::new(NoisyEstimator {
            sigma_pos_m: cfg.navigate.sigma_pos_m,
            sigma_head_deg: cfg.navigate.sigma_head_deg,
        }),
        (None, _) => Box::new(OracleEstimator),
    };
    let seeds = cfg.navigate.seeds;
    let jobs: Vec<(usize, usize)> = (0..routes.len()).flat_map(|k| (0..seeds).map(move |s| (k, s))).collect();
    let episodes = jobs
        .par_iter()
        .map(|&(k, s)| {
            let (ri, br) = &routes[k];
            let (city, table) = &cities[&br.city_seed];
            let world = World { city, table, config: &cfg.navigate.sim, estimator: estimator.as_ref() };
            run_route(&br.route, &world, mix(&[cfg.seed, *ri as u64, s as u64]))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let traj_dir = a.out.join("trajectories");
    std::fs::create_dir_all(&traj_dir)?;
    for (&(k, s), ep) in jobs.iter().zip(&episodes) {
        write_trajectory(&traj_dir.join(format!("{}_seed{s}.csv", routes[k].1.route.route_id)), &ep.log)?;
    }
    let records: Vec<_> = episodes.iter().map(|e| e.record.clone()).collect();
    export_episodes(&records, &a.out.join("episodes.csv"))?;
    let per_route = routes
        .iter()
        .enumerate()
        .map(|(k, (_, br))| {
            Ok(RouteSummary {
                route_id: br.route.route_id.clone(),
                city_seed: br.city_seed,
                length_m: br.route.length_m(),
                metrics: summarize_navigation(&records[k * seeds..(k + 1) * seeds])?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let metrics =
        NavMetrics { estimator: cfg.navigate.estimator, overall: summarize_navigation(&records)?, routes: per_route };
    write_json(&a.out.join("nav_metrics.json"), &metrics)?;
    let chosen: Vec<BenchmarkRoute> = routes.into_iter().map(|(_, r)| r).collect();
    write_routes(&a.out.join("routes.json"), &chosen)?;
    cfg.write(&a.out)?;
    let o = &metrics.overall;
    eprintln!("{} episodes: SR@20 {:.2}%  SPL {:.4}  NE {:.2} m", o.episodes, o.sr20, o.spl, o.ne);
    Ok(())
}
