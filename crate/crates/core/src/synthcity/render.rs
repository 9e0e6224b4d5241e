//! Rotated patch rendering, the parallax surrogate and weather effects.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::raster::ImageBuffer;
use super::SynthError;
use crate::geogrid::WorldPoint;
use crate::numcore::Tensor;

/// Square CHW patch with 3 channels.
#[derive(Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f32>,
}

impl std::fmt::Debug for Patch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Patch({0}x{0})", self.size)
    }
}

impl Patch {
    pub fn channels(&self) -> usize {
        3
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.size, self.size], self.data.iter().map(|v| *v as f64).collect())
            .expect("patch buffer is 3xNxN")
    }

    /// Interleaved copy, usable as a source raster.
    pub fn to_image(&self) -> ImageBuffer {
        let n = self.size;
        let mut img = ImageBuffer::new(n, n);
        for r in 0..n {
            for c in 0..n {
                let v = [0, 1, 2].map(|k| self.data[(k * n + r) * n + c]);
                img.set(r, c, v);
            }
        }
        img
    }

    pub fn mean_abs_diff(&self, other: &Patch) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sat,
    Uav,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Normal,
    Rain,
    Snow,
    Fog,
    Bright,
    Mixed,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 6] = [
        WeatherKind::Normal,
        WeatherKind::Rain,
        WeatherKind::Snow,
        WeatherKind::Fog,
        WeatherKind::Bright,
        WeatherKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeatherKind::Normal => "normal",
            WeatherKind::Rain => "rain",
            WeatherKind::Snow => "snow",
            WeatherKind::Fog => "fog",
            WeatherKind::Bright => "bright",
            WeatherKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == s)
    }
}

impl std::fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Probability of each non-normal weather kind; the remainder is normal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeatherFractions {
    pub rain: f64,
    pub snow: f64,
    pub fog: f64,
    pub bright: f64,
    pub mixed: f64,
}

impl WeatherFractions {
    /// Illumination, fog, rain and snow at 20% each.
    pub fn four_way() -> Self {
        Self { rain: 0.2, snow: 0.2, fog: 0.2, bright: 0.2, mixed: 0.0 }
    }

    fn entries(&self) -> [(WeatherKind, f64); 5] {
        [
            (WeatherKind::Rain, self.rain),
            (WeatherKind::Snow, self.snow),
            (WeatherKind::Fog, self.fog),
            (WeatherKind::Bright, self.bright),
            (WeatherKind::Mixed, self.mixed),
        ]
    }

    pub fn of(&self, kind: WeatherKind) -> f64 {
        match kind {
            WeatherKind::Normal => 1.0 - self.entries().iter().map(|e| e.1).sum::<f64>(),
            k => self.entries().iter().find(|e| e.0 == k).map(|e| e.1).unwrap_or(0.0),
        }
    }

    /// Maps a uniform draw in `[0, 1)` to a weather kind.
    pub fn pick(&self, u: f64) -> WeatherKind {
        let mut acc = 0.0;
        for (kind, p) in self.entries() {
            acc += p;
            if u < acc {
                return kind;
            }
        }
        WeatherKind::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum projective corner displacement, as a fraction of patch size.
    pub parallax_jitter: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub fog_alpha: (f64, f64),
    /// Rain streaks per pixel.
    pub rain_density: f64,
    /// Snow flakes per pixel.
    pub snow_density: f64,
    pub weather: WeatherFractions,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            parallax_jitter: 0.08,
            brightness: (0.55, 1.45),
            contrast: (0.7, 1.3),
            fog_alpha: (0.25, 0.6),
            rain_density: 0.004,
            snow_density: 0.02,
            weather: WeatherFractions::default(),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { parallax_jitter: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fr = self.weather.entries();
        if fr.iter().any(|e| !(0.0..=1.0).contains(&e.1)) || fr.iter().map(|e| e.1).sum::<f64>() > 1.0 + 1e-12 {
            return Err(SynthError::Config("weather fractions must be in [0, 1] and sum to at most 1".into()));
        }
        if !(0.0..0.25).contains(&self.parallax_jitter) {
            return Err(SynthError::Config("parallax_jitter must be in [0, 0.25)".into()));
        }
        let ranges = [self.brightness, self.contrast, self.fog_alpha];
        if ranges.iter().any(|r| r.0 > r.1) || self.fog_alpha.0 < 0.0 || self.fog_alpha.1 > 1.0 {
            return Err(SynthError::Config("invalid augmentation range".into()));
        }
        Ok(())
    }

    /// Radius in pixels that a rendered patch footprint can reach from its
    /// center, plus one pixel for interpolation.
    pub fn footprint_radius_px(&self, patch_px: usize, view: View) -> f64 {
        let jitter = if view == View::Uav { self.parallax_jitter } else { 0.0 };
        std::f64::consts::SQRT_2 * patch_px as f64 * (0.5 + jitter) + 1.0
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Maps output patch coordinates to jittered source coordinates.
struct Homography([f64; 8]);

impl Homography {
    fn from_corners(src: [[f64; 2]; 4], dst: [[f64; 2]; 4]) -> Result<Self, SynthError> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let ([x, y], [u, v]) = (src[i], dst[i]);
            let r = 2 * i;
            a.set_row(r, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
            a.set_row(
                r + 1,
                &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]),
            );
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a.lu().solve(&b).ok_or_else(|| SynthError::Config("degenerate corner jitter".into()))?;
        Ok(Self([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]]))
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + 1.0;
        ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
    }
}

/// Renders a `patch_px` square view centered on `center`.
///
/// At heading 0 the patch is the axis-aligned crop with north up; a heading
/// of θ rotates the sampling frame counterclockwise by θ. The `Sat` view is
/// the rotated bilinear crop only. The `Uav` view adds a random projective
/// corner jitter and the photometric transform of `weather`.
#[allow(clippy::too_many_arguments)]
pub fn render_patch<R: Rng>(
    image: &ImageBuffer,
    meters_per_px: f64,
    center: WorldPoint,
    heading_deg: f64,
    patch_px: usize,
    view: View,
    aug: &AugmentConfig,
    weather: WeatherKind,
    rng: &mut R,
) -> Result<Patch, SynthError> {
    let n = patch_px;
    let half = n as f64 / 2.0;
    let t = heading_deg.to_radians();
    let (ct, st) = (t.cos(), t.sin());
    let (cx, cy) = (center.x_m / meters_per_px, center.y_m / meters_per_px);
    let height = image.height as f64;

    let warp = if view == View::Uav && aug.parallax_jitter > 0.0 {
        let j = aug.parallax_jitter * n as f64;
        let src = [[-half, half], [half, half], [half, -half], [-half, -half]];
        let mut dst = src;
        for d in dst.iter_mut() {
            d[0] += rng.random_range(-j..=j);
            d[1] += rng.random_range(-j..=j);
        }
        Some(Homography::from_corners(src, dst)?)
    } else {
        None
    };

    let to_source = |u: f64, v: f64| -> (f64, f64) {
        let (u, v) = match &warp {
            Some(h) => h.apply(u, v),
            None => (u, v),
        };
        let (x, y) = (cx + ct * u - st * v, cy + st * u + ct * v);
        (x - 0.5, height - y - 0.5)
    };

    let edge = half - 0.5;
    for (u, v) in [(-edge, edge), (edge, edge), (edge, -edge), (-edge, -edge)] {
        let (col, row) = to_source(u, v);
        if image.bilinear(col, row).is_none() {
            return Err(SynthError::OffMap { x_m: center.x_m, y_m: center.y_m });
        }
    }

    let mut data = vec![0.0f32; 3 * n * n];
    for r in 0..n {
        let v = half - r as f64 - 0.5;
        for c in 0..n {
            let u = c as f64 + 0.5 - half;
            let (col, row) = to_source(u, v);
            let p = image.bilinear(col, row).ok_or(SynthError::OffMap { x_m: center.x_m, y_m: center.y_m })?;
            for k in 0..3 {
                data[(k * n + r) * n + c] = p[k];
            }
        }
    }
    let mut patch = Patch { size: n, data };
    if view == View::Uav {
        apply_weather(&mut patch, weather, aug, rng);
    }
    Ok(patch)
}

/// Parametric weather transform applied in place.
pub fn apply_weather<R: Rng>(patch: &mut Patch, weather: WeatherKind, aug: &AugmentConfig, rng: &mut R) {
    match weather {
        WeatherKind::Normal => {}
        WeatherKind::Bright => illumination(patch, draw(rng, aug.brightness), draw(rng, aug.contrast)),
        WeatherKind::Fog => fog(patch, draw(rng, aug.fog_alpha)),
        WeatherKind::Rain => rain(patch, aug.rain_density, rng),
        WeatherKind::Snow => snow(patch, aug.snow_density, rng),
        WeatherKind::Mixed => {
            fog(patch, 0.5 * draw(rng, aug.fog_alpha));
            rain(patch, 0.5 * aug.rain_density, rng);
            snow(patch, 0.5 * aug.snow_density, rng);
        }
    }
    for v in patch.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn illumination(p: &mut Patch, gain: f64, contrast: f64) {
    for v in p.data.iter_mut() {
        *v = (((*v as f64 - 0.5) * contrast + 0.5) * gain) as f32;
    }
}

fn fog(p: &mut Patch, alpha: f64) {
    let n = p.size;
    let haze = [0.84f32, 0.85, 0.87];
    for (k, &h) in haze.iter().enumerate() {
        for r in 0..n {
            // denser toward the top of the view
            let a = (alpha * (1.15 - 0.3 * r as f64 / n as f64)).clamp(0.0, 1.0) as f32;
            for c in 0..n {
                let v = &mut p.data[(k * n + r) * n + c];
                *v = *v * (1.0 - a) + h * a;
            }
        }
    }
}

fn rain<R: Rng>(p: &mut Patch, density: f64, rng: &mut R) {
    let n = p.size;
    for v in p.data.iter_mut() {
        *v *= 0.85;
    }
    let streaks = (density * (n * n) as f64).round() as usize;
    let slant: f64 = rng.random_range(-0.35..0.35);
    for _ in 0..streaks {
        let (r0, c0) = (rng.random_range(0..n) as f64, rng.random_range(0..n) as f64);
        let len = rng.random_range(5..14);
        for s in 0..len {
            let r = (r0 + s as f64) as usize;
            let c = (c0 + slant * s as f64).round();
            if r >= n || c < 0.0 || c >= n as f64 {
                break;
            }
            let c = c as usize;
            for k in 0..3 {
                let v = &mut p.data[(k * n + r) * n + c];
                *v = *v * 0.6 + 0.35;
            }
        }
    }
}

fn snow<R: Rng>(p: &mut Patch, density: f64, rng: &mut R) {
    let n = p.size;
    for r in 0..n {
        for c in 0..n {
            let m = (0..3).map(|k| p.data[(k * n + r) * n + c]).sum::<f32>() / 3.0;
            for k in 0..3 {
                let v = &mut p.data[(k * n + r) * n + c];
                *v = 0.7 * *v + 0.3 * m + 0.08;
            }
        }
    }
    let flakes = (density * (n * n) as f64).round() as usize;
    for _ in 0..flakes {
        let (r, c) = (rng.random_range(0..n), rng.random_range(0..n));
        let b = rng.random_range(0.88..1.0f32);
        let big = rng.random::<f64>() < 0.3;
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if !big && (dr, dc) != (0, 0) {
                continue;
            }
            let (rr, cc) = (r + dr, c + dc);
            if rr < n && cc < n {
                for k in 0..3 {
                    p.data[(k * n + rr) * n + cc] = b;
                }
            }
        }
    }
}
