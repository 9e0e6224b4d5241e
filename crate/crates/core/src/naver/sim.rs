//! The closed-loop navigation step and episode runner.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureTable, NavError, Route};
use crate::bearingnet::{Model, TileInput};
use crate::evalmetrics::EpisodeRecord;
use crate::geogrid::{azimuth, wrap_deg, MapSpec, RelCoord, RsbIndex, WorldPoint};
use crate::numcore::Tensor;
use crate::synthcity::{render_patch, AugmentConfig, CityRaster, View, WeatherKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub step_m: f64,
    pub waypoint_radius_m: f64,
    /// Standard deviation of the per-step heading drift, degrees.
    pub drift_sigma_deg: f64,
    /// Step budget; `ceil(2 · route length / step)` when unset.
    pub max_steps: Option<usize>,
    /// Camera patch size in pixels.
    pub patch_px: usize,
    /// Camera-view augmentation applied to rendered patches.
    pub aug: AugmentConfig,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            step_m: 25.0,
            waypoint_radius_m: 20.0,
            drift_sigma_deg: 1.0,
            max_steps: None,
            patch_px: 64,
            aug: AugmentConfig::default(),
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), NavError> {
        if !(self.step_m > 0.0 && self.step_m.is_finite()) {
            return Err(NavError::Config("step_m must be positive".into()));
        }
        if !(self.waypoint_radius_m > 0.0 && self.waypoint_radius_m.is_finite()) {
            return Err(NavError::Config("waypoint_radius_m must be positive".into()));
        }
        if !(self.drift_sigma_deg >= 0.0 && self.drift_sigma_deg.is_finite()) {
            return Err(NavError::Config("drift_sigma_deg must be non-negative".into()));
        }
        if self.patch_px == 0 {
            return Err(NavError::Config("patch_px must be positive".into()));
        }
        self.aug.validate()?;
        Ok(())
    }

    pub fn step_budget(&self, route: &Route) -> usize {
        self.max_steps.unwrap_or_else(|| (2.0 * route.length_m() / self.step_m).ceil() as usize)
    }
}

/// What an estimator may see at one step.
pub struct Observation<'a> {
    /// Block looked up from the nominal position.
    pub rsb: RsbIndex,
    /// Table rows of `rsb`.
    pub tiles: &'a [Tensor; 4],
    /// Camera view at the real pose, present when the estimator asks for it.
    pub uvp: Option<&'a Tensor>,
    /// Real pose; only simulated estimators read it.
    pub truth: TruePose,
    pub spec: &'a MapSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruePose {
    pub position: WorldPoint,
    pub heading_deg: f64,
}

/// Estimated pose: position relative to the observed block plus heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub rel: RelCoord,
    pub heading_deg: f64,
}

pub trait PoseEstimator: Sync {
    /// Whether [`Observation::uvp`] must be rendered.
    fn needs_view(&self) -> bool {
        false
    }

    fn estimate(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Estimate, NavError>;
}

/// Returns the true pose.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEstimator;

impl PoseEstimator for OracleEstimator {
    fn estimate(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Estimate, NavError> {
        Ok(Estimate { rel: obs.spec.world_to_rel(obs.rsb, obs.truth.position), heading_deg: obs.truth.heading_deg })
    }
}

/// True pose plus independent Gaussian errors.
#[derive(Debug, Clone, Copy)]
pub struct NoisyEstimator {
    pub sigma_pos_m: f64,
    pub sigma_head_deg: f64,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

impl PoseEstimator for NoisyEstimator {
    fn estimate(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Estimate, NavError> {
        let dx = gauss(rng, self.sigma_pos_m);
        let dy = gauss(rng, self.sigma_pos_m);
        let dh = gauss(rng, self.sigma_head_deg);
        let p = WorldPoint::new(obs.truth.position.x_m + dx, obs.truth.position.y_m + dy);
        Ok(Estimate { rel: obs.spec.world_to_rel(obs.rsb, p), heading_deg: wrap_deg(obs.truth.heading_deg + dh) })
    }
}

/// The regression network in operating mode.
#[derive(Debug, Clone)]
pub struct ModelEstimator(pub Model);

impl PoseEstimator for ModelEstimator {
    fn needs_view(&self) -> bool {
        true
    }

    fn estimate(&self, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Estimate, NavError> {
        let uvp = obs.uvp.ok_or_else(|| NavError::Config("model estimator needs a camera view".into()))?;
        let p = self.0.predict(uvp, TileInput::Features(obs.tiles))?;
        Ok(Estimate { rel: p.rel, heading_deg: p.heading.theta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Goal,
    MaxSteps,
    OffMap,
}

impl EndReason {
    pub fn code(self) -> &'static str {
        match self {
            EndReason::Goal => "goal",
            EndReason::MaxSteps => "max_steps",
            EndReason::OffMap => "off_map",
        }
    }
}

/// One row of the trajectory file. Command fields are empty on the final
/// row, which only records where the episode ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub r_x: f64,
    pub r_y: f64,
    pub n_x: f64,
    pub n_y: f64,
    pub theta_true: f64,
    pub theta_hat: Option<f64>,
    pub a: Option<f64>,
    pub rsb_ix: Option<usize>,
    pub rsb_iy: Option<usize>,
    pub p_x: Option<f64>,
    pub p_y: Option<f64>,
    pub drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavState {
    pub real: WorldPoint,
    pub heading_deg: f64,
    pub nominal: WorldPoint,
    /// Index of the waypoint being flown to.
    pub cursor: usize,
    pub step: usize,
    pub end: Option<EndReason>,
    pub log: Vec<StepLog>,
}

impl NavState {
    /// Starts at the first waypoint, facing the second, with the nominal
    /// pose equal to the real one.
    pub fn start(route: &Route) -> Result<Self, NavError> {
        let w = route.waypoints();
        Ok(Self {
            real: w[0],
            heading_deg: azimuth(w[0], w[1])?,
            nominal: w[0],
            cursor: 1,
            step: 0,
            end: None,
            log: Vec::new(),
        })
    }

    fn row(&self) -> StepLog {
        StepLog {
            step: self.step,
            r_x: self.real.x_m,
            r_y: self.real.y_m,
            n_x: self.nominal.x_m,
            n_y: self.nominal.y_m,
            theta_true: self.heading_deg,
            theta_hat: None,
            a: None,
            rsb_ix: None,
            rsb_iy: None,
            p_x: None,
            p_y: None,
            drift: None,
        }
    }

    fn finish(&mut self, reason: EndReason) {
        self.end = Some(reason);
        let row = self.row();
        self.log.push(row);
    }
}

/// Everything fixed during an episode.
pub struct World<'a> {
    pub city: &'a CityRaster,
    pub table: &'a FeatureTable,
    pub config: &'a NavConfig,
    pub estimator: &'a dyn PoseEstimator,
}

fn footprint_on_map(world: &World, p: WorldPoint) -> bool {
    let spec = &world.city.spec;
    let r = world.config.aug.footprint_radius_px(world.config.patch_px, View::Uav) * spec.meters_per_px;
    let e = spec.extent_m();
    p.x_m >= r && p.x_m <= e - r && p.y_m >= r && p.y_m <= e - r
}

/// Advances a non-terminal state by one step.
pub fn nav_step(state: &mut NavState, route: &Route, world: &World, rng: &mut ChaCha8Rng) -> Result<(), NavError> {
    if state.end.is_some() {
        return Err(NavError::Config("episode already ended".into()));
    }
    let spec = &world.city.spec;
    let cfg = world.config;

    let Some(rsb) = spec.rsb_containing(state.nominal) else {
        state.finish(EndReason::OffMap);
        return Ok(());
    };
    if !footprint_on_map(world, state.real) {
        state.finish(EndReason::OffMap);
        return Ok(());
    }
    let view = if world.estimator.needs_view() {
        let patch = render_patch(
            &world.city.image,
            spec.meters_per_px,
            state.real,
            state.heading_deg,
            cfg.patch_px,
            View::Uav,
            &cfg.aug,
            WeatherKind::Normal,
            rng,
        )?;
        Some(patch.to_tensor())
    } else {
        None
    };
    let tiles = world.table.block_rows(spec, rsb)?;
    let obs = Observation {
        rsb,
        tiles: &tiles,
        uvp: view.as_ref(),
        truth: TruePose { position: state.real, heading_deg: state.heading_deg },
        spec,
    };
    let est = world.estimator.estimate(&obs, rng)?;
    let p_abs = spec.rel_to_world(rsb, est.rel);
    let target = route.waypoints()[state.cursor];
    // An estimate landing exactly on the waypoint keeps the current command.
    let a = azimuth(p_abs, target).unwrap_or(state.heading_deg);
    let drift = gauss(rng, cfg.drift_sigma_deg);
    let new_heading = wrap_deg(a + (state.heading_deg - est.heading_deg) + drift);

    let mut row = state.row();
    row.theta_hat = Some(est.heading_deg);
    row.a = Some(a);
    row.rsb_ix = Some(rsb.ix);
    row.rsb_iy = Some(rsb.iy);
    row.p_x = Some(p_abs.x_m);
    row.p_y = Some(p_abs.y_m);
    row.drift = Some(drift);
    state.log.push(row);

    state.real = state.real.advance(new_heading, cfg.step_m);
    state.heading_deg = new_heading;
    state.nominal = p_abs.advance(a, cfg.step_m);
    state.step += 1;

    let w = route.waypoints();
    while state.cursor < w.len() && state.nominal.dist(w[state.cursor]) < cfg.waypoint_radius_m {
        state.cursor += 1;
    }
    if state.cursor == w.len() {
        state.finish(EndReason::Goal);
    } else if state.step >= cfg.step_budget(route) {
        state.finish(EndReason::MaxSteps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub record: EpisodeRecord,
    pub log: Vec<StepLog>,
}

/// Flies `route` until it ends. The outcome depends only on the arguments.
pub fn run_route(route: &Route, world: &World, seed: u64) -> Result<Episode, NavError> {
    world.config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = NavState::start(route)?;
    while state.end.is_none() {
        nav_step(&mut state, route, world, &mut rng)?;
    }
    let reason = state.end.expect("loop ends with a reason");
    let goal = *route.waypoints().last().expect("at least two waypoints");
    let final_dist_m = state.real.dist(goal);
    let reached_goal = reason == EndReason::Goal;
    let record = EpisodeRecord {
        route_id: route.route_id.clone(),
        seed,
        reached_goal,
        success: reached_goal && final_dist_m < world.config.waypoint_radius_m,
        path_len_m: state.step as f64 * world.config.step_m,
        shortest_len_m: route.length_m(),
        final_dist_m,
        steps: state.step,
        reason: reason.code().into(),
    };
    Ok(Episode { record, log: state.log })
}

pub fn write_trajectory(path: &Path, log: &[StepLog]) -> Result<(), NavError> {
    let err = |e: csv::Error| NavError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in log {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| NavError::Io(format!("{}: {e}", path.display())))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StepLog>, NavError> {
    let err = |e: csv::Error| NavError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<Vec<StepLog>, _>>().map_err(err)
}

/// Re-flies the logged commands; returns the largest deviation, in meters,
/// between replayed and logged real and nominal positions.
pub fn replay_deviation(log: &[StepLog], step_m: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for w in log.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        let r = WorldPoint::new(cur.r_x, cur.r_y).advance(next.theta_true, step_m);
        worst = worst.max(r.dist(WorldPoint::new(next.r_x, next.r_y)));
        if let (Some(px), Some(py), Some(a)) = (cur.p_x, cur.p_y, cur.a) {
            let n = WorldPoint::new(px, py).advance(a, step_m);
            worst = worst.max(n.dist(WorldPoint::new(next.n_x, next.n_y)));
        }
    }
    worst
}
