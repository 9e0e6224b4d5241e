//! Procedural city rasters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::noise::{fbm, mix, value_noise};
use super::SynthError;
use crate::geogrid::{MapSpec, TileId};

/// Interleaved RGB image, row 0 at the top (north), values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    #[inline]
    pub fn px(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` when
    /// outside `[0, width−1] × [0, height−1]`.
    #[inline]
    pub fn bilinear(&self, col: f64, row: f64) -> Option<[f32; 3]> {
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(0.0..=wmax).contains(&col) || !(0.0..=hmax).contains(&row) {
            return None;
        }
        let (c0, r0) = (col.floor(), row.floor());
        let (fc, fr) = ((col - c0) as f32, (row - r0) as f32);
        let (c0, r0) = (c0 as usize, r0 as usize);
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let (a, b, c, d) = (self.px(r0, c0), self.px(r0, c1), self.px(r1, c0), self.px(r1, c1));
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fc;
            let bot = c[k] + (d[k] - c[k]) * fc;
            out[k] = top + (bot - top) * fr;
        }
        Some(out)
    }
}

/// A generated city map.
#[derive(Debug, Clone, PartialEq)]
pub struct CityRaster {
    pub image: ImageBuffer,
    pub spec: MapSpec,
    pub seed: u64,
}

impl CityRaster {
    /// Axis-aligned pixels of one tile as a CHW buffer.
    pub fn tile_chw(&self, tile: TileId) -> Vec<f32> {
        let n = self.spec.rst_px();
        let size = self.spec.size_px;
        let col0 = tile.ix * n;
        let row0 = size - (tile.iy + 1) * n;
        let mut out = vec![0.0; 3 * n * n];
        for r in 0..n {
            for c in 0..n {
                let p = self.image.px(row0 + r, col0 + c);
                for k in 0..3 {
                    out[(k * n + r) * n + c] = p[k];
                }
            }
        }
        out
    }
}

/// Shadows fall toward this direction (degrees counterclockwise from east).
pub const SHADOW_AZIMUTH_DEG: f64 = 118.0;

#[derive(Clone, Copy, Debug, PartialEq)]
enum LandUse {
    Buildings,
    Park,
    Field { angle: f64, period: f64 },
    Plaza,
    Water,
    Forest,
}

struct Road {
    center: f64,
    half_width: f64,
}

fn roads<R: Rng>(rng: &mut R, extent: f64) -> Vec<Road> {
    let mut out = Vec::new();
    let mut pos = rng.random_range(10.0..70.0);
    while pos < extent {
        out.push(Road { center: pos, half_width: rng.random_range(2.5..6.0) });
        pos += rng.random_range(60.0..150.0);
    }
    out
}

fn cell_index(roads: &[Road], v: f64) -> usize {
    roads.partition_point(|r| r.center <= v)
}

fn on_road(roads: &[Road], v: f64) -> Option<&Road> {
    let i = cell_index(roads, v);
    let near = [i.checked_sub(1), Some(i)];
    near.into_iter().flatten().filter_map(|k| roads.get(k)).find(|r| (v - r.center).abs() <= r.half_width)
}

fn land_use<R: Rng>(rng: &mut R) -> LandUse {
    let u: f64 = rng.random();
    if u < 0.52 {
        LandUse::Buildings
    } else if u < 0.64 {
        LandUse::Park
    } else if u < 0.80 {
        LandUse::Field { angle: rng.random_range(0.0..std::f64::consts::PI), period: rng.random_range(4.0..11.0) }
    } else if u < 0.88 {
        LandUse::Plaza
    } else if u < 0.94 {
        LandUse::Water
    } else {
        LandUse::Forest
    }
}

fn scale(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

struct Canvas<'a> {
    img: &'a mut ImageBuffer,
    mpp: f64,
    size: usize,
}

impl Canvas<'_> {
    /// Pixel index ranges covering a world-space rectangle.
    fn span(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let clamp = |v: f64| v.max(0.0).min(self.size as f64) as usize;
        let cols = clamp((x0 / self.mpp).round())..clamp((x1 / self.mpp).round());
        let rows = clamp((self.size as f64 - y1 / self.mpp).round())..clamp((self.size as f64 - y0 / self.mpp).round());
        (rows, cols)
    }

    fn world(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.mpp, (self.size as f64 - row as f64 - 0.5) * self.mpp)
    }

    fn shade_rect(&mut self, x0: f64, x1: f64, y0: f64, y1: f64, k: f32) {
        let (rows, cols) = self.span(x0, x1, y0, y1);
        for r in rows {
            for c in cols.clone() {
                let p = self.img.px(r, c);
                self.img.set(r, c, [p[0] * k, p[1] * k, p[2] * k]);
            }
        }
    }

    fn shade_disc(&mut self, cx: f64, cy: f64, rad: f64, k: f32) {
        let (rows, cols) = self.span(cx - rad, cx + rad, cy - rad, cy + rad);
        for r in rows {
            for c in cols.clone() {
                let (x, y) = self.world(r, c);
                if (x - cx).hypot(y - cy) <= rad {
                    let p = self.img.px(r, c);
                    self.img.set(r, c, [p[0] * k, p[1] * k, p[2] * k]);
                }
            }
        }
    }
}

impl Canvas<'_> {
    /// Tree crown: darkened disc whose half facing away from the shadow
    /// direction is lit.
    fn lit_disc(&mut self, cx: f64, cy: f64, rad: f64, (sx, sy): (f64, f64)) {
        let (rows, cols) = self.span(cx - rad, cx + rad, cy - rad, cy + rad);
        for r in rows {
            for c in cols.clone() {
                let (x, y) = self.world(r, c);
                let (dx, dy) = (x - cx, y - cy);
                if dx.hypot(dy) <= rad {
                    let k = if dx * sx + dy * sy < 0.0 { 0.95 } else { 0.55 };
                    let p = self.img.px(r, c);
                    self.img.set(r, c, [p[0] * k * 0.8, p[1] * k, p[2] * k * 0.7]);
                }
            }
        }
    }
}

fn to_px(c: [f64; 3]) -> [f32; 3] {
    [c[0].clamp(0.0, 1.0) as f32, c[1].clamp(0.0, 1.0) as f32, c[2].clamp(0.0, 1.0) as f32]
}

const ROOFS: [[f64; 3]; 6] = [
    [0.74, 0.72, 0.69],
    [0.58, 0.27, 0.21],
    [0.40, 0.41, 0.44],
    [0.88, 0.87, 0.83],
    [0.52, 0.43, 0.33],
    [0.30, 0.42, 0.52],
];

/// Generates a city raster deterministically from `seed`.
///
/// Feature sizes are defined in meters, so a given seed produces the same
/// layout at any resolution. The raster combines a road grid, per-block
/// land use (buildings, parks, fields, plazas, water, forest), buildings
/// with gabled roofs and directional shadows, trees, and a low-frequency
/// color tint that makes neighbouring tiles distinguishable.
pub fn generate_city(seed: u64, spec: &MapSpec) -> Result<CityRaster, SynthError> {
    spec.validate()?;
    let size = spec.size_px;
    let mpp = spec.meters_per_px;
    let extent = spec.extent_m();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xC17E]));

    let xroads = roads(&mut rng, extent);
    let yroads = roads(&mut rng, extent);
    let ncx = xroads.len() + 1;
    let ncy = yroads.len() + 1;
    let uses: Vec<LandUse> = (0..ncx * ncy).map(|_| land_use(&mut rng)).collect();

    let s_ground = mix(&[seed, 1]);
    let s_tint = [mix(&[seed, 2]), mix(&[seed, 3]), mix(&[seed, 4])];
    let s_detail = mix(&[seed, 5]);

    let mut image = ImageBuffer::new(size, size);
    let bounds = |roads: &[Road], i: usize| -> (f64, f64) {
        let lo = if i == 0 { 0.0 } else { roads[i - 1].center + roads[i - 1].half_width };
        let hi = if i < roads.len() { roads[i].center - roads[i].half_width } else { extent };
        (lo, hi)
    };

    for row in 0..size {
        let y = (size as f64 - row as f64 - 0.5) * mpp;
        for col in 0..size {
            let x = (col as f64 + 0.5) * mpp;
            let detail = value_noise(s_detail, x / 1.7, y / 1.7) - 0.5;
            let ground = fbm(s_ground, x, y, 96.0, 3);
            let road = on_road(&xroads, x)
                .map(|r| ((x - r.center).abs(), y, r))
                .or_else(|| on_road(&yroads, y).map(|r| ((y - r.center).abs(), x, r)));
            let mut c = if let Some((offset, along, r)) = road {
                let dashed = r.half_width > 4.0 && offset < 0.35 && (along / 3.0).floor() as i64 % 2 == 0;
                if dashed {
                    [0.9, 0.9, 0.85]
                } else {
                    let g = 0.30 + 0.06 * ground + 0.04 * detail;
                    [g, g, g * 1.03]
                }
            } else {
                let (ix, iy) = (cell_index(&xroads, x), cell_index(&yroads, y));
                match uses[iy * ncx + ix] {
                    LandUse::Buildings => {
                        let g = 0.56 + 0.08 * ground + 0.05 * detail;
                        [g, g * 0.98, g * 0.94]
                    }
                    LandUse::Park => lerp([0.27, 0.47, 0.20], [0.42, 0.55, 0.26], ground + 0.3 * detail),
                    LandUse::Field { angle, period } => {
                        let t = x * angle.cos() + y * angle.sin();
                        let stripe = ((t / period).fract() < 0.5) as u8 as f64;
                        lerp([0.62, 0.58, 0.33], [0.45, 0.55, 0.25], 0.7 * stripe + 0.3 * ground)
                    }
                    LandUse::Plaza => {
                        let grid = ((x / 4.0).fract() < 0.08 || (y / 4.0).fract() < 0.08) as u8 as f64;
                        let g = 0.70 - 0.12 * grid + 0.04 * detail;
                        [g, g * 0.97, g * 0.9]
                    }
                    LandUse::Water => {
                        let w = 0.05 * ground + 0.03 * detail;
                        [0.13 + w, 0.28 + w, 0.42 + w]
                    }
                    LandUse::Forest => {
                        let n = value_noise(s_detail ^ 77, x / 4.0, y / 4.0);
                        lerp([0.10, 0.25, 0.10], [0.22, 0.40, 0.17], 0.6 * n + 0.4 * ground)
                    }
                }
            };
            for (k, s) in s_tint.iter().enumerate() {
                c[k] *= 0.75 + 0.5 * fbm(*s, x, y, 150.0, 2);
            }
            image.set(row, col, to_px(c));
        }
    }

    let mut canvas = Canvas { img: &mut image, mpp, size };
    let sd = SHADOW_AZIMUTH_DEG.to_radians();
    let (sx, sy) = (sd.cos(), sd.sin());
    for iy in 0..ncy {
        let (y0, y1) = bounds(&yroads, iy);
        for ix in 0..ncx {
            let (x0, x1) = bounds(&xroads, ix);
            match uses[iy * ncx + ix] {
                LandUse::Buildings => place_buildings(&mut canvas, &mut rng, (x0, x1, y0, y1), (sx, sy)),
                LandUse::Park => place_trees(&mut canvas, &mut rng, (x0, x1, y0, y1), (sx, sy), 0.012),
                LandUse::Forest => place_trees(&mut canvas, &mut rng, (x0, x1, y0, y1), (sx, sy), 0.02),
                LandUse::Field { .. } => place_trees(&mut canvas, &mut rng, (x0, x1, y0, y1), (sx, sy), 0.003),
                LandUse::Plaza => place_trees(&mut canvas, &mut rng, (x0, x1, y0, y1), (sx, sy), 0.004),
                LandUse::Water => {}
            }
        }
    }

    Ok(CityRaster { image, spec: *spec, seed })
}

fn place_buildings<R: Rng>(
    canvas: &mut Canvas,
    rng: &mut R,
    (x0, x1, y0, y1): (f64, f64, f64, f64),
    (sx, sy): (f64, f64),
) {
    let inset = 3.0;
    let (x0, x1, y0, y1) = (x0 + inset, x1 - inset, y0 + inset, y1 - inset);
    if x1 - x0 < 8.0 || y1 - y0 < 8.0 {
        return;
    }
    let mut ly = y0;
    while ly < y1 - 6.0 {
        let lh = rng.random_range(10.0..30.0f64).min(y1 - ly);
        let mut lx = x0;
        while lx < x1 - 6.0 {
            let lw = rng.random_range(10.0..30.0f64).min(x1 - lx);
            if rng.random::<f64>() < 0.85 {
                let m = rng.random_range(1.0..3.0);
                let (bx0, bx1, by0, by1) = (lx + m, lx + lw - m, ly + m, ly + lh - m);
                if bx1 - bx0 > 3.0 && by1 - by0 > 3.0 {
                    let height: f64 = rng.random_range(3.0..20.0);
                    let len = 0.35 * height;
                    for k in 1..=4 {
                        let f = len * k as f64 / 4.0;
                        canvas.shade_rect(bx0 + sx * f, bx1 + sx * f, by0 + sy * f, by1 + sy * f, 0.8);
                    }
                    let base = ROOFS[rng.random_range(0..ROOFS.len())];
                    let jitter = rng.random_range(0.9..1.1);
                    draw_roof(canvas, (bx0, bx1, by0, by1), scale(base, jitter), (sx, sy));
                }
            }
            lx += lw;
        }
        ly += lh;
    }
}

/// Gabled roof split along its long axis; the half facing away from the
/// shadow direction is lit.
fn draw_roof(canvas: &mut Canvas, (x0, x1, y0, y1): (f64, f64, f64, f64), color: [f64; 3], (sx, sy): (f64, f64)) {
    let (rows, cols) = canvas.span(x0, x1, y0, y1);
    let split_x = (x1 - x0) < (y1 - y0);
    let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    for r in rows {
        for c in cols.clone() {
            let (x, y) = canvas.world(r, c);
            let side = if split_x { (x - mx) * sx } else { (y - my) * sy };
            let k = if side < 0.0 { 1.15 } else { 0.85 };
            let edge = (x - x0).min(x1 - x).min(y - y0).min(y1 - y) < 0.8;
            let k = if edge { k * 0.8 } else { k };
            canvas.img.set(r, c, to_px(scale(color, k)));
        }
    }
}

fn place_trees<R: Rng>(
    canvas: &mut Canvas,
    rng: &mut R,
    (x0, x1, y0, y1): (f64, f64, f64, f64),
    (sx, sy): (f64, f64),
    density: f64,
) {
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    let n = ((x1 - x0) * (y1 - y0) * density) as usize;
    for _ in 0..n {
        let (cx, cy) = (rng.random_range(x0..x1), rng.random_range(y0..y1));
        let rad = rng.random_range(1.8..4.5);
        canvas.shade_disc(cx + 1.3 * sx * rad, cy + 1.3 * sy * rad, rad, 0.5);
        canvas.lit_disc(cx, cy, rad, (sx, sy));
    }
}
