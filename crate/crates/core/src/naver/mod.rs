//! Waypoint navigation by repeated visual pose estimation.
//!
//! The UAV keeps a nominal position it believes in. Each step it looks up
//! the block containing the nominal position in a precomputed feature
//! table, estimates its pose from the camera view, turns toward the next
//! waypoint by the difference between the waypoint azimuth and its heading
//! estimate, and flies one step. Only camera rendering and final scoring
//! read the real pose.

mod route;
mod sim;
mod table;

pub use route::{
    benchmark_routes, read_routes, write_routes, BenchmarkRoute, Route, BENCHMARK_CITY_SEEDS, BENCHMARK_MARGIN_M,
    BENCHMARK_ROUTE_SEEDS,
};
pub use sim::{
    nav_step, read_trajectory, replay_deviation, run_route, write_trajectory, EndReason, Episode, Estimate,
    ModelEstimator, NavConfig, NavState, NoisyEstimator, Observation, OracleEstimator, PoseEstimator, StepLog,
    TruePose, World,
};
pub use table::{featurize_map, featurize_with, FeatureTable};

use crate::bearingnet::ModelError;
use crate::geogrid::GeoError;
use crate::synthcity::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum NavError {
    #[error("invalid navigation setup: {0}")]
    Config(String),
    #[error("invalid route: {0}")]
    Route(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
}

#[cfg(test)]
mod tests;
