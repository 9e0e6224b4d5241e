//! On-disk dataset layout.
//!
//! ```text
//! out_dir/
//!   dataset.json            effective DatasetConfig
//!   metadata.csv            one row per sample
//!   cities/city_{i}.json    CitySidecar
//!   cities/city_{i}/tiles/tile_{ix}_{iy}.buvp
//!   patches/{id}_uvp.buvp, patches/{id}_sat.buvp
//! ```
//!
//! Patch files hold a 16-byte header (`b"BUVP"`, then `u16` C, H, W in
//! little-endian, then 6 zero bytes) followed by `C·H·W` little-endian
//! `f32` values in CHW order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::noise::{mix, splitmix64};
use super::raster::{generate_city, CityRaster};
use super::render::{AugmentConfig, Patch, WeatherKind};
use super::sample::{render_pose, sample_poses, SamplePose};
use super::SynthError;
use crate::geogrid::{MapSpec, TileId};

const PATCH_MAGIC: &[u8; 4] = b"BUVP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// One seed per city.
    pub cities: Vec<u64>,
    pub spec: MapSpec,
    pub n_per_rsb: usize,
    pub patch_px: usize,
    pub aug: AugmentConfig,
    /// Seeds pose sampling, independently of the city seeds.
    pub seed: u64,
}

impl DatasetConfig {
    /// One desk-scale city with 20 samples per block.
    pub fn desk() -> Self {
        Self {
            cities: vec![1],
            spec: MapSpec::desk(),
            n_per_rsb: 20,
            patch_px: 64,
            aug: AugmentConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.spec.validate()?;
        self.aug.validate()?;
        if self.cities.is_empty() || self.n_per_rsb == 0 || self.patch_px == 0 {
            return Err(SynthError::Config(
                "need at least one city, one sample per block and a nonzero patch size".into(),
            ));
        }
        if self.patch_px > u16::MAX as usize || self.spec.rst_px() > u16::MAX as usize {
            return Err(SynthError::Config("patch side exceeds the file format limit".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.cities.len() * self.spec.block_count() * self.n_per_rsb
    }

    /// Poses of every sample of one city, in id order.
    pub fn city_poses(&self, city: usize) -> Result<Vec<SamplePose>, SynthError> {
        let per_city = (self.spec.block_count() * self.n_per_rsb) as u64;
        let n = self.spec.blocks_per_side();
        let mut out = Vec::with_capacity(per_city as usize);
        for rsb in self.spec.blocks() {
            let lin = (rsb.iy * n + rsb.ix) as u64;
            let first = city as u64 * per_city + lin * self.n_per_rsb as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
                self.seed,
                self.cities[city],
                city as u64,
                rsb.ix as u64,
                rsb.iy as u64,
            ]));
            out.extend(sample_poses(&self.spec, rsb, self.n_per_rsb, first, self.patch_px, &self.aug, &mut rng)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitySidecar {
    pub map_px: usize,
    pub meters_per_px: f64,
    pub tiles_per_side: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub sample_id: u64,
    pub city: usize,
    pub rsb_ix: usize,
    pub rsb_iy: usize,
    pub rel_x: f64,
    pub rel_y: f64,
    pub theta_deg: f64,
    pub cos: f64,
    pub sin: f64,
    pub weather: WeatherKind,
    pub split: Split,
    pub uvp_path: String,
    pub sat_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub rows: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// SHA-256 of metadata.csv, hex encoded.
    pub metadata_sha256: String,
}

/// 7:2:1 split by rank of a hash of each id: the `round(0.7·n)` lowest
/// hashes train, the next `round(0.2·n)` validate, the rest test.
pub fn assign_splits(ids: &[u64]) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(ids[i] ^ 0x5EED_5B17), ids[i]));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn write_patch(path: &Path, patch: &Patch) -> Result<(), SynthError> {
    let n = patch.size as u16;
    let mut buf = Vec::with_capacity(16 + 4 * patch.data.len());
    buf.extend_from_slice(PATCH_MAGIC);
    for v in [3u16, n, n] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&[0u8; 6]);
    for v in &patch.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| SynthError::io(path, e))
}

pub fn read_patch(path: &Path) -> Result<Patch, SynthError> {
    let bytes = fs::read(path).map_err(|e| SynthError::io(path, e))?;
    let bad = |msg: &str| SynthError::Format { path: path.to_path_buf(), msg: msg.into() };
    if bytes.len() < 16 || &bytes[..4] != PATCH_MAGIC {
        return Err(bad("not a BUVP patch file"));
    }
    let dim = |i: usize| u16::from_le_bytes([bytes[4 + 2 * i], bytes[5 + 2 * i]]) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 || h != w {
        return Err(bad("expected a square 3-channel patch"));
    }
    if bytes.len() != 16 + 4 * c * h * w {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Patch { size: h, data })
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>, SynthError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| SynthError::Format { path: path.to_path_buf(), msg: e.to_string() })?;
    rdr.deserialize()
        .collect::<Result<Vec<MetadataRow>, _>>()
        .map_err(|e| SynthError::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn city_sidecar_path(out_dir: &Path, city: usize) -> PathBuf {
    out_dir.join("cities").join(format!("city_{city}.json"))
}

pub fn tile_path(out_dir: &Path, city: usize, tile: TileId) -> PathBuf {
    out_dir.join("cities").join(format!("city_{city}")).join("tiles").join(format!("tile_{}_{}.buvp", tile.ix, tile.iy))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| SynthError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(path).map_err(|e| SynthError::io(path, e))
}

/// Generates every city, samples and renders all poses, and writes the
/// dataset under `out_dir`. With `metadata_only`, images are skipped but
/// metadata.csv is byte-identical to a full build.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path, metadata_only: bool) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    create_dir(&out_dir.join("cities"))?;
    if !metadata_only {
        create_dir(&out_dir.join("patches"))?;
    }
    write_json(&out_dir.join("dataset.json"), cfg)?;

    let mut poses = Vec::with_capacity(cfg.sample_count());
    for (ci, &seed) in cfg.cities.iter().enumerate() {
        write_json(
            &city_sidecar_path(out_dir, ci),
            &CitySidecar {
                map_px: cfg.spec.size_px,
                meters_per_px: cfg.spec.meters_per_px,
                tiles_per_side: cfg.spec.tiles_per_side,
                seed,
            },
        )?;
        let city_poses = cfg.city_poses(ci)?;
        if !metadata_only {
            let city = generate_city(seed, &cfg.spec)?;
            write_city_images(cfg, &city, ci, &city_poses, out_dir)?;
        }
        poses.extend(city_poses.into_iter().map(|p| (ci, p)));
    }

    let ids: Vec<u64> = poses.iter().map(|(_, p)| p.sample_id).collect();
    let splits = assign_splits(&ids);
    let meta_path = out_dir.join("metadata.csv");
    let file = fs::File::create(&meta_path).map_err(|e| SynthError::io(&meta_path, e))?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| SynthError::Format { path: meta_path.clone(), msg: e.to_string() };
    for ((ci, p), split) in poses.iter().zip(&splits) {
        wtr.serialize(MetadataRow {
            sample_id: p.sample_id,
            city: *ci,
            rsb_ix: p.rsb.ix,
            rsb_iy: p.rsb.iy,
            rel_x: p.rel.x,
            rel_y: p.rel.y,
            theta_deg: p.heading.theta,
            cos: p.heading.vec[0],
            sin: p.heading.vec[1],
            weather: p.weather,
            split: *split,
            uvp_path: patch_rel_path(p.sample_id, "uvp"),
            sat_path: patch_rel_path(p.sample_id, "sat"),
        })
        .map_err(csv_err)?;
    }
    wtr.into_inner()
        .map_err(|e| SynthError::Format { path: meta_path.clone(), msg: e.to_string() })?
        .flush()
        .map_err(|e| SynthError::io(&meta_path, e))?;

    let digest = Sha256::digest(fs::read(&meta_path).map_err(|e| SynthError::io(&meta_path, e))?);
    let count = |s: Split| splits.iter().filter(|v| **v == s).count();
    let manifest = DatasetManifest {
        rows: poses.len(),
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
        metadata_sha256: hex::encode(digest),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn patch_rel_path(id: u64, view: &str) -> String {
    format!("patches/{id:07}_{view}.buvp")
}

fn write_city_images(
    cfg: &DatasetConfig,
    city: &CityRaster,
    ci: usize,
    poses: &[SamplePose],
    out_dir: &Path,
) -> Result<(), SynthError> {
    let tiles_dir =
        tile_path(out_dir, ci, TileId { ix: 0, iy: 0 }).parent().expect("tile path has a parent").to_path_buf();
    create_dir(&tiles_dir)?;
    let n = cfg.spec.tiles_per_side;
    for iy in 0..n {
        for ix in 0..n {
            let tile = TileId { ix, iy };
            let patch = Patch { size: cfg.spec.rst_px(), data: city.tile_chw(tile) };
            write_patch(&tile_path(out_dir, ci, tile), &patch)?;
        }
    }
    for chunk in poses.chunks(256) {
        let rendered =
            chunk.par_iter().map(|p| render_pose(city, p, cfg.patch_px, &cfg.aug)).collect::<Result<Vec<_>, _>>()?;
        for pair in rendered {
            let id = pair.pose.sample_id;
            write_patch(&out_dir.join(patch_rel_path(id, "uvp")), &pair.uvp)?;
            write_patch(&out_dir.join(patch_rel_path(id, "sat")), &pair.sat_patch)?;
        }
    }
    Ok(())
}

/// Reads every tile of city `ci` in [`TileId::linear`] order.
pub fn read_city_tiles(out_dir: &Path, ci: usize, spec: &MapSpec) -> Result<Vec<Patch>, SynthError> {
    let n = spec.tiles_per_side;
    let mut out = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            out.push(read_patch(&tile_path(out_dir, ci, TileId { ix, iy }))?);
        }
    }
    Ok(out)
}

pub fn read_dataset_config(out_dir: &Path) -> Result<DatasetConfig, SynthError> {
    let path = out_dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| SynthError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Format { path, msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            cities: vec![5],
            spec: MapSpec { size_px: 256, meters_per_px: 1.0, tiles_per_side: 8 },
            n_per_rsb: 1,
            patch_px: 16,
            aug: AugmentConfig::default(),
            seed: 2,
        }
    }

    #[test]
    fn patch_file_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.buvp");
        let patch = Patch { size: 2, data: (0..12).map(|v| v as f32 * 0.5).collect() };
        write_patch(&path, &patch).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(&bytes[..16], &[b'B', b'U', b'V', b'P', 3, 0, 2, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &0.5f32.to_le_bytes());
        assert_eq!(read_patch(&path).unwrap(), patch);
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_patch(&path), Err(SynthError::Format { .. })));
    }

    #[test]
    fn splits_hit_exact_counts() {
        for n in [1usize, 7, 10, 225, 4500] {
            let ids: Vec<u64> = (0..n as u64).collect();
            let s = assign_splits(&ids);
            let c = |k| s.iter().filter(|v| **v == k).count();
            assert_eq!(c(Split::Train), (0.7 * n as f64).round() as usize);
            assert_eq!(c(Split::Val), (0.2 * n as f64).round() as usize);
            assert_eq!(c(Split::Train) + c(Split::Val) + c(Split::Test), n);
        }
    }

    #[test]
    fn metadata_only_matches_full_build() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = build_dataset(&cfg, a.path(), false).unwrap();
        let meta = build_dataset(&cfg, b.path(), true).unwrap();
        assert_eq!(full, meta);
        assert_eq!(full.rows, 49);
        let rows = read_metadata(&a.path().join("metadata.csv")).unwrap();
        let p = read_patch(&a.path().join(&rows[0].uvp_path)).unwrap();
        assert_eq!(p.size, 16);
        let tiles = read_city_tiles(a.path(), 0, &cfg.spec).unwrap();
        assert_eq!(tiles.len(), 64);
        assert_eq!(read_dataset_config(a.path()).unwrap(), cfg);
    }
}
