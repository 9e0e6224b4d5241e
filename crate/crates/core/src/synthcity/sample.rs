//! Per-block pose sampling and sample rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::CityRaster;
use super::render::{render_patch, AugmentConfig, Patch, View, WeatherKind};
use super::SynthError;
use crate::geogrid::{Heading, MapSpec, RelCoord, RsbIndex, WorldPoint};

/// Everything about a sample except its pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePose {
    pub sample_id: u64,
    pub rsb: RsbIndex,
    pub rel: RelCoord,
    pub heading: Heading,
    pub weather: WeatherKind,
    /// Seeds the jitter and weather draws of the UAV view.
    pub render_seed: u64,
}

impl SamplePose {
    pub fn center(&self, spec: &MapSpec) -> WorldPoint {
        spec.rel_to_world(self.rsb, self.rel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub pose: SamplePose,
    pub uvp: Patch,
    pub sat_patch: Patch,
}

/// Relative-coordinate box `[x_lo, x_hi] × [y_lo, y_hi]` from which poses
/// of `rsb` are drawn: the block's `[−1, 1]²` area clipped so the rotated,
/// jittered footprint stays on the map.
pub fn sampling_range(
    spec: &MapSpec,
    rsb: RsbIndex,
    patch_px: usize,
    aug: &AugmentConfig,
) -> Result<[f64; 4], SynthError> {
    let radius_m = aug.footprint_radius_px(patch_px, View::Uav) * spec.meters_per_px;
    let c = spec.rsb_center(rsb);
    let u = spec.unit_m();
    let e = spec.extent_m();
    let clip = |v: f64| ((-1.0f64).max((radius_m - v) / u), 1.0f64.min((e - radius_m - v) / u));
    let (x_lo, x_hi) = clip(c.x_m);
    let (y_lo, y_hi) = clip(c.y_m);
    if x_lo > x_hi || y_lo > y_hi {
        return Err(SynthError::Config(format!(
            "a {patch_px} px patch cannot be sampled inside block ({}, {})",
            rsb.ix, rsb.iy
        )));
    }
    Ok([x_lo, x_hi, y_lo, y_hi])
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws `n` poses in `rsb` with ids `first_id..first_id + n`.
pub fn sample_poses<R: Rng>(
    spec: &MapSpec,
    rsb: RsbIndex,
    n: usize,
    first_id: u64,
    patch_px: usize,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<SamplePose>, SynthError> {
    spec.rsb(rsb.ix as i64, rsb.iy as i64)?;
    aug.validate()?;
    let [x_lo, x_hi, y_lo, y_hi] = sampling_range(spec, rsb, patch_px, aug)?;
    Ok((0..n as u64)
        .map(|k| {
            let rel = RelCoord::new(uniform(rng, x_lo, x_hi), uniform(rng, y_lo, y_hi));
            let heading = Heading::from_degrees(rng.random_range(0.0..360.0));
            let weather = aug.weather.pick(rng.random::<f64>());
            SamplePose { sample_id: first_id + k, rsb, rel, heading, weather, render_seed: rng.random() }
        })
        .collect())
}

/// Renders the UAV and satellite views of one pose.
pub fn render_pose(
    city: &CityRaster,
    pose: &SamplePose,
    patch_px: usize,
    aug: &AugmentConfig,
) -> Result<SamplePair, SynthError> {
    let spec = &city.spec;
    let center = pose.center(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(pose.render_seed);
    let theta = pose.heading.theta;
    let mpp = spec.meters_per_px;
    let sat_patch =
        render_patch(&city.image, mpp, center, theta, patch_px, View::Sat, aug, WeatherKind::Normal, &mut rng)?;
    let uvp = render_patch(&city.image, mpp, center, theta, patch_px, View::Uav, aug, pose.weather, &mut rng)?;
    Ok(SamplePair { pose: *pose, uvp, sat_patch })
}

/// Samples and renders `n` pairs in `rsb`, with ids `0..n`.
pub fn sample_rsb<R: Rng>(
    city: &CityRaster,
    rsb: RsbIndex,
    n: usize,
    patch_px: usize,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<SamplePair>, SynthError> {
    if n == 0 {
        return Err(SynthError::Config("n must be at least 1".into()));
    }
    sample_poses(&city.spec, rsb, n, 0, patch_px, aug, rng)?
        .iter()
        .map(|p| render_pose(city, p, patch_px, aug))
        .collect()
}
