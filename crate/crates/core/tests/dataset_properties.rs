use bearing_core::geogrid::MapSpec;
use bearing_core::synthcity::{
    build_dataset, generate_city, read_metadata, sample_poses, AugmentConfig, DatasetConfig, WeatherFractions,
    WeatherKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn interior(spec: &MapSpec) -> bearing_core::geogrid::RsbIndex {
    let n = spec.blocks_per_side() as i64;
    spec.rsb(n / 2, n / 2).unwrap()
}

#[test]
fn relative_offsets_center_on_zero() {
    let spec = MapSpec::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses = sample_poses(&spec, interior(&spec), 10_000, 0, 64, &AugmentConfig::default(), &mut rng).unwrap();
    let n = poses.len() as f64;
    let mx = poses.iter().map(|p| p.rel.x).sum::<f64>() / n;
    let my = poses.iter().map(|p| p.rel.y).sum::<f64>() / n;
    assert!(mx.abs() < 0.03 && my.abs() < 0.03, "mean ({mx}, {my})");
    assert!(poses.iter().all(|p| p.rel.x.abs() <= 1.0 && p.rel.y.abs() <= 1.0));
}

#[test]
fn weather_frequencies_match_configuration() {
    let spec = MapSpec::desk();
    let aug = AugmentConfig { weather: WeatherFractions::four_way(), ..AugmentConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let poses = sample_poses(&spec, interior(&spec), 20_000, 0, 64, &aug, &mut rng).unwrap();
    let n = poses.len() as f64;
    for kind in [WeatherKind::Normal, WeatherKind::Rain, WeatherKind::Snow, WeatherKind::Fog, WeatherKind::Bright] {
        let p = aug.weather.of(kind);
        let got = poses.iter().filter(|s| s.weather == kind).count() as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((got - p).abs() <= 3.0 * sigma, "{kind:?}: {got} vs {p}");
    }
}

#[test]
fn one_sample_per_block_gives_225_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { n_per_rsb: 1, ..DatasetConfig::desk() };
    let m = build_dataset(&cfg, dir.path(), false).unwrap();
    assert_eq!(m.rows, 225);
    assert_eq!(read_metadata(&dir.path().join("metadata.csv")).unwrap().len(), 225);
}

#[test]
fn rebuild_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { n_per_rsb: 2, ..DatasetConfig::desk() };
    build_dataset(&cfg, a.path(), false).unwrap();
    build_dataset(&cfg, b.path(), true).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metadata.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn four_cities_metadata_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { cities: vec![1, 2, 3, 4], n_per_rsb: 100, ..DatasetConfig::desk() };
    let m = build_dataset(&cfg, dir.path(), true).unwrap();
    assert_eq!(m.rows, 90_000);
    assert_eq!(m.train + m.val + m.test, 90_000);
    assert!(!dir.path().join("patches").exists());
}

fn autocorrelation(luma: &[f64], w: usize, h: usize, dx: usize) -> f64 {
    let mean = luma.iter().sum::<f64>() / luma.len() as f64;
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w - dx {
            acc += (luma[r * w + c] - mean) * (luma[r * w + c + dx] - mean);
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn raster_texture_decorrelates_with_distance() {
    let spec = MapSpec::desk();
    let city = generate_city(3, &spec).unwrap();
    let img = &city.image;
    let luma: Vec<f64> = img.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) as f64 / 3.0).collect();
    let near = autocorrelation(&luma, img.width, img.height, 0);
    let far = autocorrelation(&luma, img.width, img.height, 64);
    assert!(near > 0.0);
    assert!(near > far, "offset 0 {near}, offset 64 {far}");
}
