//! Cross-view UAV position and heading regression with a waypoint
//! navigation simulator.
//!
//! The crate is layered bottom-up:
//!
//! - [`numcore`]: float64 tensors and a reverse-mode tape.
//! - [`geogrid`]: map, tile and block geometry plus angle helpers.
//! - [`synthcity`]: procedural city rasters and cross-view sample rendering.
//! - [`bearingnet`]: the regression network and its loss.
//! - [`trainer`]: Adam, plateau schedule and the epoch loop.
//! - [`evalmetrics`]: localization, heading and navigation metrics.
//! - [`naver`]: feature tables and the closed-loop navigation simulator.

pub mod bearingnet;
pub mod evalmetrics;
pub mod geogrid;
pub mod naver;
pub mod numcore;
pub mod synthcity;
pub mod trainer;
