use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bearingnet::{Model, ModelConfig, TileInput};
use crate::geogrid::{ang_diff, MapSpec, WorldPoint};
use crate::numcore::Tensor;
use crate::synthcity::{generate_city, AugmentConfig, CityRaster};
use crate::trainer::city_tile_tensors;

fn desk_city(seed: u64) -> CityRaster {
    generate_city(seed, &MapSpec::desk()).unwrap()
}

fn blank_table(spec: &MapSpec) -> FeatureTable {
    let t = spec.tiles_per_side;
    FeatureTable {
        tiles_per_side: t,
        kd: 4,
        vectors: vec![Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(); t * t],
        checkpoint_id: [0; 32],
    }
}

fn quiet() -> NavConfig {
    NavConfig { drift_sigma_deg: 0.0, aug: AugmentConfig::none(), ..NavConfig::default() }
}

fn straight_north() -> Route {
    Route::straight("north", WorldPoint::new(300.0, 200.0), 90.0, 500.0, 10).unwrap()
}

struct HeadingBias(f64);

impl PoseEstimator for HeadingBias {
    fn estimate(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Estimate, NavError> {
        let e = OracleEstimator.estimate(obs, rng)?;
        Ok(Estimate { heading_deg: e.heading_deg + self.0, ..e })
    }
}

struct ConstantHeading;

impl PoseEstimator for ConstantHeading {
    fn estimate(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Estimate, NavError> {
        let e = OracleEstimator.estimate(obs, rng)?;
        Ok(Estimate { heading_deg: 0.0, ..e })
    }
}

#[test]
fn oracle_flies_straight_route_exactly() {
    let city = desk_city(1);
    let table = blank_table(&city.spec);
    let cfg = quiet();
    let world = World { city: &city, table: &table, config: &cfg, estimator: &OracleEstimator };
    let route = straight_north();
    let ep = run_route(&route, &world, 0).unwrap();
    assert_eq!(ep.record.reason, "goal");
    assert_eq!(ep.record.steps, 20);
    assert!(ep.record.success);
    assert!(ep.record.final_dist_m <= cfg.waypoint_radius_m);
    for row in &ep.log {
        assert!((row.r_x - row.n_x).abs() < 1e-9 && (row.r_y - row.n_y).abs() < 1e-9, "step {}", row.step);
        if let Some(a) = row.a {
            assert!(ang_diff(a, 90.0) < 1e-9);
        }
    }
}

#[test]
fn heading_bias_propagates_to_realized_heading() {
    let city = desk_city(1);
    let table = blank_table(&city.spec);
    let cfg = quiet();
    let est = HeadingBias(10.0);
    let world = World { city: &city, table: &table, config: &cfg, estimator: &est };
    let route = straight_north();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = NavState::start(&route).unwrap();
    nav_step(&mut state, &route, &world, &mut rng).unwrap();
    let a = state.log[0].a.unwrap();
    assert!((ang_diff(state.heading_deg, a) - 10.0).abs() < 1e-9);
    assert!(ang_diff(state.heading_deg, wrap(a - 10.0)) < 1e-9);
}

fn wrap(a: f64) -> f64 {
    crate::geogrid::wrap_deg(a)
}

#[test]
fn heading_residual_equals_estimate_error_plus_drift() {
    let city = desk_city(2);
    let table = blank_table(&city.spec);
    let cfg = NavConfig { drift_sigma_deg: 2.0, aug: AugmentConfig::none(), ..NavConfig::default() };
    let est = NoisyEstimator { sigma_pos_m: 5.0, sigma_head_deg: 5.0 };
    let world = World { city: &city, table: &table, config: &cfg, estimator: &est };
    let ep = run_route(&straight_north(), &world, 9).unwrap();
    for w in ep.log.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        let residual = next.theta_true - cur.a.unwrap();
        let expected = cur.theta_true - cur.theta_hat.unwrap() + cur.drift.unwrap();
        assert!(ang_diff(residual, expected) < 1e-9);
    }
}

#[test]
fn episodes_are_deterministic_and_replayable() {
    let city = desk_city(3);
    let table = blank_table(&city.spec);
    let cfg = NavConfig { aug: AugmentConfig::none(), ..NavConfig::default() };
    let est = NoisyEstimator { sigma_pos_m: 5.0, sigma_head_deg: 5.0 };
    let world = World { city: &city, table: &table, config: &cfg, estimator: &est };
    let route = Route::generate("r", &city.spec, 5, BENCHMARK_MARGIN_M).unwrap();
    let a = run_route(&route, &world, 42).unwrap();
    let b = run_route(&route, &world, 42).unwrap();
    assert_eq!(a, b);
    let c = run_route(&route, &world, 43).unwrap();
    assert_ne!(a.log, c.log);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.csv");
    write_trajectory(&path, &a.log).unwrap();
    let back = read_trajectory(&path).unwrap();
    assert_eq!(back, a.log);
    assert!(replay_deviation(&back, cfg.step_m) < 1e-9);
}

#[test]
fn lookups_follow_the_nominal_position() {
    let city = desk_city(4);
    let table = blank_table(&city.spec);
    let cfg = NavConfig { aug: AugmentConfig::none(), ..NavConfig::default() };
    let est = NoisyEstimator { sigma_pos_m: 15.0, sigma_head_deg: 8.0 };
    let world = World { city: &city, table: &table, config: &cfg, estimator: &est };
    let route = Route::generate("r", &city.spec, 6, BENCHMARK_MARGIN_M).unwrap();
    let ep = run_route(&route, &world, 1).unwrap();
    let mut diverged = false;
    for row in &ep.log {
        if let (Some(ix), Some(iy)) = (row.rsb_ix, row.rsb_iy) {
            let by_nominal = city.spec.rsb_containing(WorldPoint::new(row.n_x, row.n_y)).unwrap();
            assert_eq!((ix, iy), (by_nominal.ix, by_nominal.iy));
            let by_real = city.spec.rsb_containing(WorldPoint::new(row.r_x, row.r_y));
            diverged |= by_real != Some(by_nominal);
        }
    }
    assert!(diverged, "fixture should separate real and nominal blocks at least once");
}

#[test]
fn constant_heading_estimator_fails_on_northward_route() {
    let city = desk_city(1);
    let table = blank_table(&city.spec);
    let cfg = quiet();
    let world = World { city: &city, table: &table, config: &cfg, estimator: &ConstantHeading };
    let ep = run_route(&straight_north(), &world, 0).unwrap();
    assert!(!ep.record.success);
    assert_eq!(ep.record.reason, "max_steps");
    assert_eq!(ep.record.steps, 40);
}

#[test]
fn leaving_the_map_ends_the_episode() {
    let city = desk_city(1);
    let table = blank_table(&city.spec);
    let cfg = quiet();
    let world = World { city: &city, table: &table, config: &cfg, estimator: &OracleEstimator };
    let route = Route::straight("edge", WorldPoint::new(500.0, 900.0), 90.0, 300.0, 6).unwrap();
    let ep = run_route(&route, &world, 0).unwrap();
    assert_eq!(ep.record.reason, "off_map");
    assert!(!ep.record.success);
}

#[test]
fn benchmark_routes_match_protocol() {
    let spec = MapSpec::desk();
    let routes = benchmark_routes(&spec).unwrap();
    assert_eq!(routes.len(), 8);
    for (i, br) in routes.iter().enumerate() {
        let r = &br.route;
        assert_eq!(br.city_seed, BENCHMARK_CITY_SEEDS[i / 2]);
        assert!((500.0..=1200.0).contains(&r.length_m()), "{} is {} m", r.route_id, r.length_m());
        assert!((10..=13).contains(&r.waypoints().len()));
        assert!(r.waypoints().windows(2).all(|w| w[0].dist(w[1]) > 40.0));
        r.check_on_map(&spec, BENCHMARK_MARGIN_M).unwrap();
    }
    assert_eq!(benchmark_routes(&spec).unwrap(), routes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("routes.json");
    write_routes(&path, &routes).unwrap();
    let back = read_routes(&path).unwrap();
    assert_eq!(back.len(), 8);
    for (a, b) in back.iter().zip(&routes) {
        assert_eq!(a.route.route_id, b.route.route_id);
        for (p, q) in a.route.waypoints().iter().zip(b.route.waypoints()) {
            assert!(p.dist(*q) < 1e-9);
        }
    }
}

#[test]
fn invalid_routes_are_rejected() {
    let p = WorldPoint::new(100.0, 100.0);
    assert!(Route::new("a", vec![p]).is_err());
    assert!(Route::new("b", vec![p, p]).is_err());
    assert!(serde_json::from_str::<Route>(r#"{"route_id":"c","waypoints":[[1.0,2.0]]}"#).is_err());
}

fn small_spec() -> MapSpec {
    MapSpec { size_px: 256, meters_per_px: 1.0, tiles_per_side: 8 }
}

#[test]
fn feature_table_matches_training_mode_and_round_trips() {
    let city = generate_city(7, &small_spec()).unwrap();
    let model = Model::new(ModelConfig::tiny(3, 6, 32), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let table = featurize_with(&city, &model, [9; 32]).unwrap();
    assert_eq!(table.vectors.len(), 64);
    for v in &table.vectors {
        let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(featurize_with(&city, &model, [9; 32]).unwrap().to_bytes(), table.to_bytes());

    let tiles = city_tile_tensors(&city);
    let rsb = crate::geogrid::RsbIndex { ix: 2, iy: 5 };
    let ids = city.spec.rsb_tiles(rsb).unwrap();
    let raw: Vec<Tensor> = ids.iter().map(|t| tiles[t.linear(8)].clone()).collect();
    let feats = table.block_rows(&city.spec, rsb).unwrap();
    let uvp = Tensor::new(&[3, 32, 32], (0..3 * 32 * 32).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap();
    let a = model.forward(&uvp, TileInput::Raw(&raw)).unwrap();
    let b = model.forward(&uvp, TileInput::Features(&feats)).unwrap();
    for (x, y) in a.p_hat.data().iter().chain(a.h_raw.data()).zip(b.p_hat.data().iter().chain(b.h_raw.data())) {
        assert!((x - y).abs() < 1e-12);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bftb");
    table.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"BFTB");
    assert_eq!(bytes.len(), 12 + 4 * 64 * table.kd + 32);
    let back = FeatureTable::load(&path).unwrap();
    assert_eq!(back.checkpoint_id, [9; 32]);
    for (p, q) in back.vectors.iter().zip(&table.vectors) {
        for (x, y) in p.data().iter().zip(q.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert!(FeatureTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn model_estimator_runs_in_closed_loop() {
    let city = generate_city(8, &small_spec()).unwrap();
    let model = Model::new(ModelConfig::tiny(2, 4, 16), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let table = featurize_with(&city, &model, [0; 32]).unwrap();
    let cfg = NavConfig { patch_px: 16, max_steps: Some(4), aug: AugmentConfig::none(), ..NavConfig::default() };
    let est = ModelEstimator(model);
    let world = World { city: &city, table: &table, config: &cfg, estimator: &est };
    let route = Route::straight("s", WorldPoint::new(100.0, 100.0), 0.0, 60.0, 2).unwrap();
    let a = run_route(&route, &world, 1).unwrap();
    assert_eq!(a, run_route(&route, &world, 1).unwrap());
    assert!(a.record.steps >= 1);
}

#[test]
fn table_dimension_mismatch_is_an_error() {
    let city = generate_city(8, &small_spec()).unwrap();
    let model = Model::new(ModelConfig::tiny(2, 4, 64), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut cfg = model.config.clone();
    cfg.backbone_widths = vec![4, 4, 4, 4, 4, 4];
    let deep = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(featurize_with(&city, &deep, [0; 32]).is_err());
    let table = featurize_with(&city, &model, [0; 32]).unwrap();
    assert!(table.block_rows(&MapSpec::desk(), crate::geogrid::RsbIndex { ix: 0, iy: 0 }).is_err());
}
