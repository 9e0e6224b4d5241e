//! Waypoint routes and the fixed benchmark set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NavError;
use crate::geogrid::{MapSpec, WorldPoint};
use crate::synthcity::mix;

/// An ordered polyline of at least two distinct, on-map waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RouteFile", into = "RouteFile")]
pub struct Route {
    pub route_id: String,
    waypoints: Vec<WorldPoint>,
}

#[derive(Serialize, Deserialize)]
struct RouteFile {
    route_id: String,
    waypoints: Vec<[f64; 2]>,
}

impl TryFrom<RouteFile> for Route {
    type Error = String;

    fn try_from(f: RouteFile) -> Result<Self, String> {
        Route::new(f.route_id, f.waypoints.iter().map(|p| WorldPoint::new(p[0], p[1])).collect())
            .map_err(|e| e.to_string())
    }
}

impl From<Route> for RouteFile {
    fn from(r: Route) -> Self {
        RouteFile { route_id: r.route_id, waypoints: r.waypoints.iter().map(|p| [p.x_m, p.y_m]).collect() }
    }
}

impl Route {
    pub fn new(route_id: impl Into<String>, waypoints: Vec<WorldPoint>) -> Result<Self, NavError> {
        let route_id = route_id.into();
        if waypoints.len() < 2 {
            return Err(NavError::Route(format!("route {route_id} needs at least 2 waypoints")));
        }
        if waypoints.iter().any(|p| !p.x_m.is_finite() || !p.y_m.is_finite()) {
            return Err(NavError::Route(format!("route {route_id} has a non-finite waypoint")));
        }
        if waypoints.windows(2).any(|w| w[0] == w[1]) {
            return Err(NavError::Route(format!("route {route_id} repeats a waypoint")));
        }
        Ok(Self { route_id, waypoints })
    }

    /// Equally spaced waypoints on a straight line of `length_m` meters.
    pub fn straight(
        route_id: impl Into<String>,
        start: WorldPoint,
        heading_deg: f64,
        length_m: f64,
        segments: usize,
    ) -> Result<Self, NavError> {
        if segments == 0 || length_m <= 0.0 {
            return Err(NavError::Route("a straight route needs a positive length and segment count".into()));
        }
        let pts = (0..=segments).map(|i| start.advance(heading_deg, length_m * i as f64 / segments as f64)).collect();
        Self::new(route_id, pts)
    }

    pub fn waypoints(&self) -> &[WorldPoint] {
        &self.waypoints
    }

    pub fn length_m(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Checks that every waypoint lies at least `margin_m` inside the map.
    pub fn check_on_map(&self, spec: &MapSpec, margin_m: f64) -> Result<(), NavError> {
        let e = spec.extent_m();
        for p in &self.waypoints {
            let inside = |v: f64| v >= margin_m && v <= e - margin_m;
            if !inside(p.x_m) || !inside(p.y_m) {
                return Err(NavError::Route(format!(
                    "route {}: waypoint ({:.1}, {:.1}) is within {margin_m} m of the map edge",
                    self.route_id, p.x_m, p.y_m
                )));
            }
        }
        Ok(())
    }

    /// A seeded tortuous route: 10 to 13 waypoints, segments of 56 to 95 m
    /// turning up to ±75° each, all at least `margin_m` inside the map.
    pub fn generate(route_id: impl Into<String>, spec: &MapSpec, seed: u64, margin_m: f64) -> Result<Self, NavError> {
        let route_id = route_id.into();
        let e = spec.extent_m();
        if e <= 2.0 * margin_m {
            return Err(NavError::Route("margin leaves no room for a route".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x0207E]));
        let inside =
            |p: WorldPoint| p.x_m >= margin_m && p.x_m <= e - margin_m && p.y_m >= margin_m && p.y_m <= e - margin_m;
        for _ in 0..1000 {
            let n = rng.random_range(10..=13usize);
            let mut pts = vec![WorldPoint::new(
                rng.random_range(margin_m..e - margin_m),
                rng.random_range(margin_m..e - margin_m),
            )];
            let mut dir: f64 = rng.random_range(0.0..360.0);
            let mut ok = true;
            while pts.len() < n {
                let mut placed = false;
                for _ in 0..50 {
                    let d = dir + rng.random_range(-75.0..75.0);
                    let p = pts[pts.len() - 1].advance(d, rng.random_range(56.0..95.0));
                    if inside(p) {
                        pts.push(p);
                        dir = d;
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    ok = false;
                    break;
                }
            }
            if ok {
                return Self::new(route_id, pts);
            }
        }
        Err(NavError::Route(format!("could not place route {route_id} on the map")))
    }
}

/// City seeds of the benchmark; two routes per city.
pub const BENCHMARK_CITY_SEEDS: [u64; 4] = [101, 202, 303, 404];

/// Route seeds of the benchmark, in route order.
pub const BENCHMARK_ROUTE_SEEDS: [u64; 8] = [7001, 7002, 7003, 7004, 7005, 7006, 7007, 7008];

/// Distance kept between benchmark waypoints and the map edge.
pub const BENCHMARK_MARGIN_M: f64 = 160.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRoute {
    pub city_seed: u64,
    pub route: Route,
}

/// The eight benchmark routes on `spec`, ids `route_0` to `route_7`.
pub fn benchmark_routes(spec: &MapSpec) -> Result<Vec<BenchmarkRoute>, NavError> {
    BENCHMARK_ROUTE_SEEDS
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let route = Route::generate(format!("route_{i}"), spec, seed, BENCHMARK_MARGIN_M)?;
            Ok(BenchmarkRoute { city_seed: BENCHMARK_CITY_SEEDS[i / 2], route })
        })
        .collect()
}

pub fn write_routes(path: &Path, routes: &[BenchmarkRoute]) -> Result<(), NavError> {
    let json = serde_json::to_string_pretty(routes).expect("routes serialize");
    std::fs::write(path, json).map_err(|e| NavError::Io(format!("{}: {e}", path.display())))
}

pub fn read_routes(path: &Path) -> Result<Vec<BenchmarkRoute>, NavError> {
    let text = std::fs::read_to_string(path).map_err(|e| NavError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| NavError::Format(format!("{}: {e}", path.display())))
}
