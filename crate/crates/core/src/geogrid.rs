//! Map, tile and block geometry.
//!
//! The map frame has its origin at the southwest corner with +x east and
//! +y north, in meters. The map is cut into `tiles_per_side²` square
//! remote-sensing tiles (RSTs); every 2×2 group of adjacent tiles forms a
//! remote-sensing block (RSB), so blocks overlap and there are
//! `(tiles_per_side − 1)²` of them.
//!
//! Inside a block, positions are expressed in relative units where the
//! four tile centers sit at `(±1, ±1)`. Angles are degrees counterclockwise
//! from east.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("invalid map spec: {0}")]
    InvalidSpec(String),
    #[error("block index ({ix}, {iy}) out of range for a {n}x{n} block grid")]
    BlockOutOfRange { ix: i64, iy: i64, n: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Relative coordinates of the four tiles of a block, in canonical order.
///
/// This order is shared by the coordinate encoder, the similarity-guided
/// coordinate and the cross-attention keys.
pub const TILE_CENTERS: [[f64; 2]; 4] = [[-1.0, 1.0], [-1.0, -1.0], [1.0, 1.0], [1.0, -1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub size_px: usize,
    pub meters_per_px: f64,
    pub tiles_per_side: usize,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self { size_px: 4096, meters_per_px: 0.25, tiles_per_side: 16 }
    }
}

impl MapSpec {
    /// 1024 px at 1 m/px: same 1024 m extent and 64 m tiles as the
    /// default, with 64 px tiles.
    pub fn desk() -> Self {
        Self { size_px: 1024, meters_per_px: 1.0, tiles_per_side: 16 }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.tiles_per_side < 2 {
            return Err(GeoError::InvalidSpec("need at least 2 tiles per side".into()));
        }
        if self.size_px == 0 || !self.size_px.is_multiple_of(self.tiles_per_side) {
            return Err(GeoError::InvalidSpec(format!(
                "size_px {} is not divisible by tiles_per_side {}",
                self.size_px, self.tiles_per_side
            )));
        }
        if !(self.meters_per_px > 0.0 && self.meters_per_px.is_finite()) {
            return Err(GeoError::InvalidSpec("meters_per_px must be positive".into()));
        }
        Ok(())
    }

    pub fn rst_px(&self) -> usize {
        self.size_px / self.tiles_per_side
    }

    pub fn rst_m(&self) -> f64 {
        self.rst_px() as f64 * self.meters_per_px
    }

    /// Meters per relative unit (half a tile).
    pub fn unit_m(&self) -> f64 {
        self.rst_m() / 2.0
    }

    pub fn extent_m(&self) -> f64 {
        self.size_px as f64 * self.meters_per_px
    }

    pub fn blocks_per_side(&self) -> usize {
        self.tiles_per_side - 1
    }

    pub fn block_count(&self) -> usize {
        self.blocks_per_side().pow(2)
    }

    pub fn contains(&self, p: WorldPoint) -> bool {
        let e = self.extent_m();
        (0.0..=e).contains(&p.x_m) && (0.0..=e).contains(&p.y_m)
    }

    pub fn rsb(&self, ix: i64, iy: i64) -> Result<RsbIndex, GeoError> {
        let n = self.blocks_per_side();
        if ix < 0 || iy < 0 || ix as usize >= n || iy as usize >= n {
            return Err(GeoError::BlockOutOfRange { ix, iy, n });
        }
        Ok(RsbIndex { ix: ix as usize, iy: iy as usize })
    }

    /// All blocks, row by row from the south edge.
    pub fn blocks(&self) -> impl Iterator<Item = RsbIndex> {
        let n = self.blocks_per_side();
        (0..n).flat_map(move |iy| (0..n).map(move |ix| RsbIndex { ix, iy }))
    }

    /// The four tiles of `rsb` in [`TILE_CENTERS`] order.
    pub fn rsb_tiles(&self, rsb: RsbIndex) -> Result<[TileId; 4], GeoError> {
        self.rsb(rsb.ix as i64, rsb.iy as i64)?;
        let (ix, iy) = (rsb.ix, rsb.iy);
        Ok([TileId { ix, iy: iy + 1 }, TileId { ix, iy }, TileId { ix: ix + 1, iy: iy + 1 }, TileId { ix: ix + 1, iy }])
    }

    pub fn rsb_center(&self, rsb: RsbIndex) -> WorldPoint {
        let rst = self.rst_m();
        WorldPoint { x_m: (rsb.ix + 1) as f64 * rst, y_m: (rsb.iy + 1) as f64 * rst }
    }

    pub fn tile_center(&self, tile: TileId) -> WorldPoint {
        let rst = self.rst_m();
        WorldPoint { x_m: (tile.ix as f64 + 0.5) * rst, y_m: (tile.iy as f64 + 0.5) * rst }
    }

    pub fn world_to_rel(&self, rsb: RsbIndex, p: WorldPoint) -> RelCoord {
        let c = self.rsb_center(rsb);
        let u = self.unit_m();
        RelCoord { x: (p.x_m - c.x_m) / u, y: (p.y_m - c.y_m) / u }
    }

    pub fn rel_to_world(&self, rsb: RsbIndex, rel: RelCoord) -> WorldPoint {
        let c = self.rsb_center(rsb);
        let u = self.unit_m();
        WorldPoint { x_m: c.x_m + rel.x * u, y_m: c.y_m + rel.y * u }
    }

    /// The block whose sampling area `[−1, 1]²` contains `p`. Points in the
    /// outer half-tile margin map to the nearest edge block.
    pub fn rsb_containing(&self, p: WorldPoint) -> Option<RsbIndex> {
        if !self.contains(p) {
            return None;
        }
        let last = self.blocks_per_side() as i64 - 1;
        let pick = |v: f64| ((v / self.rst_m() - 0.5).floor() as i64).clamp(0, last) as usize;
        Some(RsbIndex { ix: pick(p.x_m), iy: pick(p.y_m) })
    }
}

/// Tile grid cell; `(0, 0)` is the southwest tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub ix: usize,
    pub iy: usize,
}

impl TileId {
    /// Row-major index with rows running south to north.
    pub fn linear(self, tiles_per_side: usize) -> usize {
        self.iy * tiles_per_side + self.ix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RsbIndex {
    pub ix: usize,
    pub iy: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelCoord {
    pub x: f64,
    pub y: f64,
}

impl RelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_sampling_area(&self) -> bool {
        self.x.abs() <= 1.0 && self.y.abs() <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x_m: f64,
    pub y_m: f64,
}

impl WorldPoint {
    pub fn new(x_m: f64, y_m: f64) -> Self {
        Self { x_m, y_m }
    }

    pub fn dist(self, other: WorldPoint) -> f64 {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }

    /// Moves `dist` meters along `theta_deg`.
    pub fn advance(self, theta_deg: f64, dist: f64) -> WorldPoint {
        let t = theta_deg.to_radians();
        WorldPoint { x_m: self.x_m + dist * t.cos(), y_m: self.y_m + dist * t.sin() }
    }
}

/// Heading angle with its unit direction vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heading {
    pub theta: f64,
    pub vec: [f64; 2],
}

impl Heading {
    pub fn from_degrees(theta: f64) -> Self {
        let theta = wrap_deg(theta);
        let t = theta.to_radians();
        Self { theta, vec: [t.cos(), t.sin()] }
    }

    /// Angle of an arbitrary nonzero 2-vector; the vector is normalized.
    pub fn from_vector(v: [f64; 2]) -> Result<Self, GeoError> {
        let n = v[0].hypot(v[1]);
        if n == 0.0 || !n.is_finite() {
            return Err(GeoError::Degenerate("heading vector has no direction".into()));
        }
        Ok(Self { theta: heading_angle(v), vec: [v[0] / n, v[1] / n] })
    }
}

/// Wraps an angle into `[0, 360)`.
pub fn wrap_deg(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Angle of `v` in `[0, 360)`.
pub fn heading_angle(v: [f64; 2]) -> f64 {
    wrap_deg(v[1].atan2(v[0]).to_degrees())
}

/// Direction from `from` to `to` in `[0, 360)`.
pub fn azimuth(from: WorldPoint, to: WorldPoint) -> Result<f64, GeoError> {
    let (dx, dy) = (to.x_m - from.x_m, to.y_m - from.y_m);
    if dx == 0.0 && dy == 0.0 {
        return Err(GeoError::Degenerate("azimuth between identical points".into()));
    }
    Ok(heading_angle([dx, dy]))
}

/// Smallest absolute difference between two angles, in `[0, 180]`.
pub fn ang_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Index into [`TILE_CENTERS`] of the closest tile center; ties go to the
/// lowest index.
pub fn nearest_rst(rel: RelCoord) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in TILE_CENTERS.iter().enumerate() {
        let d = (rel.x - c[0]).powi(2) + (rel.y - c[1]).powi(2);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn default_geometry() {
        let s = MapSpec::default();
        s.validate().unwrap();
        assert_eq!(s.rst_px(), 256);
        assert_eq!(s.rst_m(), 64.0);
        assert_eq!(s.unit_m(), 32.0);
        assert_eq!(s.blocks_per_side(), 15);
        let d = MapSpec::desk();
        assert_eq!((d.rst_px(), d.unit_m(), d.extent_m()), (64, 32.0, 1024.0));
        assert!(MapSpec { size_px: 1000, meters_per_px: 1.0, tiles_per_side: 16 }.validate().is_err());
    }

    #[test]
    fn corner_blocks() {
        let s = MapSpec::default();
        let cells = |ix, iy| s.rsb_tiles(RsbIndex { ix, iy }).unwrap().map(|t| (t.ix, t.iy));
        assert_eq!(cells(0, 0), [(0, 1), (0, 0), (1, 1), (1, 0)]);
        assert_eq!(cells(14, 14), [(14, 15), (14, 14), (15, 15), (15, 14)]);
        assert!(s.rsb_tiles(RsbIndex { ix: 15, iy: 0 }).is_err());
        assert!(matches!(s.rsb(-1, 3), Err(GeoError::BlockOutOfRange { .. })));
    }

    #[test]
    fn tile_membership_counts() {
        let s = MapSpec::default();
        let mut count: HashMap<TileId, usize> = HashMap::new();
        for b in s.blocks() {
            for t in s.rsb_tiles(b).unwrap() {
                *count.entry(t).or_default() += 1;
            }
        }
        let n = s.tiles_per_side;
        assert_eq!(count.len(), n * n);
        for (t, c) in count {
            let edge_x = t.ix == 0 || t.ix == n - 1;
            let edge_y = t.iy == 0 || t.iy == n - 1;
            let expected = match (edge_x, edge_y) {
                (false, false) => 4,
                (true, true) => 1,
                _ => 2,
            };
            assert_eq!(c, expected, "{t:?}");
        }
    }

    #[test]
    fn tile_centers_match_relative_coordinates() {
        let s = MapSpec::default();
        let b = RsbIndex { ix: 3, iy: 7 };
        for (tile, c) in s.rsb_tiles(b).unwrap().iter().zip(TILE_CENTERS) {
            let rel = s.world_to_rel(b, s.tile_center(*tile));
            assert_eq!((rel.x, rel.y), (c[0], c[1]));
        }
        assert_eq!(s.world_to_rel(b, s.rsb_center(b)), RelCoord::new(0.0, 0.0));
    }

    #[test]
    fn nearest_rst_cases() {
        assert_eq!(TILE_CENTERS[nearest_rst(RelCoord::new(0.3, -0.2))], [1.0, -1.0]);
        assert_eq!(nearest_rst(RelCoord::new(0.0, 0.0)), 0);
        // tie between (-1,-1) and (1,-1) goes to index 1
        assert_eq!(nearest_rst(RelCoord::new(0.0, -0.5)), 1);
    }

    #[test]
    fn azimuth_and_differences() {
        let o = WorldPoint::new(0.0, 0.0);
        assert_eq!(azimuth(o, WorldPoint::new(0.0, 100.0)).unwrap(), 90.0);
        assert_eq!(azimuth(o, WorldPoint::new(-5.0, 0.0)).unwrap(), 180.0);
        assert!(azimuth(o, o).is_err());
        assert_eq!(ang_diff(350.0, 10.0), 20.0);
        assert_eq!(ang_diff(42.0, 42.0), 0.0);
        assert_eq!(ang_diff(1.0, 359.0), 2.0);
        assert_eq!(ang_diff(0.0, 180.0), 180.0);
    }

    #[test]
    fn heading_convention() {
        assert_eq!(heading_angle([1.0, 0.0]), 0.0);
        assert_eq!(heading_angle([0.0, 1.0]), 90.0);
        assert_eq!(Heading::from_vector([0.0, -3.0]).unwrap().theta, 270.0);
        assert!(Heading::from_vector([0.0, 0.0]).is_err());
        assert_eq!(wrap_deg(-1e-20), 0.0);
    }

    #[test]
    fn sampling_areas_tile_the_interior() {
        let s = MapSpec::desk();
        // every interior point belongs to exactly one block's [-1,1)^2 area
        for i in 0..200 {
            for j in 0..200 {
                let p = WorldPoint::new(32.0 + i as f64 * 4.8, 32.0 + j as f64 * 4.8);
                let owners: Vec<_> = s
                    .blocks()
                    .filter(|b| {
                        let r = s.world_to_rel(*b, p);
                        (-1.0..1.0).contains(&r.x) && (-1.0..1.0).contains(&r.y)
                    })
                    .collect();
                assert_eq!(owners.len(), 1, "{p:?}");
                assert_eq!(s.rsb_containing(p), Some(owners[0]));
            }
        }
        // outer margin is half a tile: rst_px/2 = 128 px at full scale
        let full = MapSpec::default();
        let first = full.rsb_center(RsbIndex { ix: 0, iy: 0 }).x_m - full.unit_m();
        assert_eq!(first / full.meters_per_px, 128.0);
    }

    proptest! {
        #[test]
        fn rel_world_round_trip(ix in 0usize..15, iy in 0usize..15, x in -5.0f64..1100.0, y in -5.0f64..1100.0) {
            let s = MapSpec::default();
            let b = RsbIndex { ix, iy };
            let p = WorldPoint::new(x, y);
            let back = s.rel_to_world(b, s.world_to_rel(b, p));
            prop_assert!(back.dist(p) < 1e-9);
        }

        #[test]
        fn nearest_matches_brute_force(x in -3.0f64..3.0, y in -3.0f64..3.0) {
            let rel = RelCoord::new(x, y);
            let d: Vec<f64> = TILE_CENTERS.iter().map(|c| ((x - c[0]).powi(2) + (y - c[1]).powi(2)).sqrt()).collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = d.iter().position(|v| *v == best).unwrap();
            prop_assert_eq!(nearest_rst(rel), first);
        }

        #[test]
        fn azimuth_recovers_direction(theta in 0.0f64..360.0, t in 0.01f64..500.0) {
            let p = WorldPoint::new(400.0, 300.0);
            let q = p.advance(theta, t);
            prop_assert!(ang_diff(azimuth(p, q).unwrap(), theta) < 1e-9);
        }
    }
}
