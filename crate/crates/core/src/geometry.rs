//! Point cloud <-> equirectangular range image codec.
//!
//! Rows index inclination (polar angle from +z, top row first) inside the
//! sensor's vertical field of view; columns index azimuth over the full turn
//! starting at -pi. The depth channel stores `log2(d + 1) / c` and the
//! intensity channel `r / q`, both clamped to `[0, 1]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    intensities: Vec<f64>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, intensities: Vec<f64>) -> Result<Self> {
        if positions.len() != intensities.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} intensities", positions.len()),
                got: format!("{}", intensities.len()),
            });
        }
        if let Some(i) = positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinite(format!("point {i}: {:?}", positions[i])));
        }
        if let Some(i) = intensities.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("intensity {i}")));
        }
        Ok(PointCloud {
            positions,
            intensities,
        })
    }

    pub fn with_capacity(n: usize) -> Self {
        PointCloud {
            positions: Vec::with_capacity(n),
            intensities: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, position: [f64; 3], intensity: f64) -> Result<()> {
        if !position.iter().all(|c| c.is_finite()) || !intensity.is_finite() {
            return Err(Error::NonFinite(format!("{position:?} / {intensity}")));
        }
        self.positions.push(position);
        self.intensities.push(intensity);
        Ok(())
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 3], f64)> + '_ {
        self.positions
            .iter()
            .copied()
            .zip(self.intensities.iter().copied())
    }

    /// Multiplies every intensity by `factor` (unit conversion knob).
    pub fn scale_intensities(&mut self, factor: f64) {
        for r in &mut self.intensities {
            *r *= factor;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    /// Polar angle from +z, in `[0, pi]`.
    pub inclination: f64,
    /// `atan2(y, x)`, in `(-pi, pi]`.
    pub azimuth: f64,
    pub range: f64,
}

pub fn cart_to_sph(p: [f64; 3]) -> Result<SphericalPoint> {
    let [x, y, z] = p;
    if !(x.is_finite() && y.is_finite() && z.is_finite()) {
        return Err(Error::NonFinite(format!("{p:?}")));
    }
    let d = (x * x + y * y + z * z).sqrt();
    if d == 0.0 {
        return Ok(SphericalPoint {
            inclination: 0.0,
            azimuth: 0.0,
            range: 0.0,
        });
    }
    Ok(SphericalPoint {
        inclination: (z / d).clamp(-1.0, 1.0).acos(),
        azimuth: y.atan2(x),
        range: d,
    })
}

pub fn sph_to_cart(s: SphericalPoint) -> [f64; 3] {
    let (st, ct) = s.inclination.sin_cos();
    let (sp, cp) = s.azimuth.sin_cos();
    [s.range * st * cp, s.range * st * sp, s.range * ct]
}

/// Normalized log-depth `log2(d + 1) / c`, clamped to 1 above `2^c - 1`.
pub fn encode_depth(d: f64, c: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::OutOfRange(format!("depth {d} must be >= 0")));
    }
    Ok(((d + 1.0).log2() / c).min(1.0))
}

pub fn decode_depth(v: f64, c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange(format!(
            "normalized depth {v} not in [0, 1]"
        )));
    }
    Ok((v * c).exp2() - 1.0)
}

/// Largest depth error introduced by storing a normalized depth as `f32`,
/// for a true depth `d` inside the encodable range.
pub fn depth_quantization_bound(d: f64, c: f64) -> f64 {
    // One f32 ulp on [0, 1] is at most f32::EPSILON; the f64 arithmetic on
    // top of it adds a few ulps relative to d.
    let dv = f32::EPSILON as f64;
    (d + 1.0) * ((c * dv).exp2() - 1.0) + 8.0 * f64::EPSILON * (d + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Smallest polar angle mapped to row 0 (radians).
    pub theta_min: f64,
    /// Polar angle at the bottom edge of the last row (radians).
    pub theta_max: f64,
    /// Log-depth divisor `c`.
    pub depth_log_divisor: f64,
    /// Intensity divisor `q`.
    pub intensity_divisor: f64,
    /// Returns closer than this (meters) are treated as ray drop.
    pub min_depth: f64,
}

impl ProjectionConfig {
    /// Builds a config from elevation angles in degrees above the horizon.
    pub fn from_elevation_deg(
        height: usize,
        width: usize,
        fov_up_deg: f64,
        fov_down_deg: f64,
        depth_log_divisor: f64,
        intensity_divisor: f64,
    ) -> Self {
        ProjectionConfig {
            height,
            width,
            theta_min: (90.0 - fov_up_deg).to_radians(),
            theta_max: (90.0 - fov_down_deg).to_radians(),
            depth_log_divisor,
            intensity_divisor,
            min_depth: 0.5,
        }
    }

    /// HDL-64E layout: 64x1024, elevation +2.0 to -24.8 deg, `c = 6`, `q = 255`.
    pub fn kitti() -> Self {
        Self::from_elevation_deg(64, 1024, 2.0, -24.8, 6.0, 255.0)
    }

    /// HDL-32E layout: 32x1024, elevation +10 to -30 deg, `c = 6.5`, `q = 31`.
    pub fn nuscenes() -> Self {
        Self::from_elevation_deg(32, 1024, 10.0, -30.0, 6.5, 31.0)
    }

    /// The KITTI sensor window at 64x256 for fast training.
    pub fn small() -> Self {
        Self::from_elevation_deg(64, 256, 2.0, -24.8, 6.0, 255.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("height and width must be >= 1");
        }
        if !(self.theta_min < self.theta_max) {
            return bad("theta_min must be < theta_max");
        }
        if !(self.theta_min >= 0.0 && self.theta_max <= PI) {
            return bad("inclination window must lie within [0, pi]");
        }
        if !(self.depth_log_divisor > 0.0) || !(self.intensity_divisor > 0.0) {
            return bad("depth and intensity divisors must be > 0");
        }
        if !(self.min_depth >= 0.0) {
            return bad("min_depth must be >= 0");
        }
        Ok(())
    }

    pub fn row_bin(&self) -> f64 {
        (self.theta_max - self.theta_min) / self.height as f64
    }

    pub fn col_bin(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    /// Largest encodable depth, `2^c - 1`.
    pub fn max_depth(&self) -> f64 {
        self.depth_log_divisor.exp2() - 1.0
    }

    pub fn row_center(&self, row: usize) -> f64 {
        self.theta_min + (row as f64 + 0.5) * self.row_bin()
    }

    pub fn col_center(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * self.col_bin()
    }

    /// Pixel containing the direction, or `None` outside the vertical window.
    pub fn pixel_of(&self, inclination: f64, azimuth: f64) -> Option<(usize, usize)> {
        let r = ((inclination - self.theta_min) / self.row_bin()).floor();
        if !(r >= 0.0 && r < self.height as f64) {
            return None;
        }
        let c = ((azimuth + PI) / self.col_bin()).floor() as i64;
        let c = c.rem_euclid(self.width as i64) as usize;
        Some((r as usize, c))
    }

    pub fn encode_depth(&self, d: f64) -> Result<f64> {
        encode_depth(d, self.depth_log_divisor)
    }

    pub fn decode_depth(&self, v: f64) -> Result<f64> {
        decode_depth(v, self.depth_log_divisor)
    }
}

/// Two-channel range image plus return mask. Channels are row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    depth: Vec<f32>,
    intensity: Vec<f32>,
    mask: Vec<bool>,
}

impl RangeImage {
    /// All pixels empty: depth 0, intensity 0, mask false.
    pub fn empty(height: usize, width: usize) -> Self {
        RangeImage {
            height,
            width,
            depth: vec![0.0; height * width],
            intensity: vec![0.0; height * width],
            mask: vec![false; height * width],
        }
    }

    pub fn from_parts(
        height: usize,
        width: usize,
        depth: Vec<f32>,
        intensity: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = height * width;
        if depth.len() != n || intensity.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} pixels per channel"),
                got: format!("{}/{}/{}", depth.len(), intensity.len(), mask.len()),
            });
        }
        if let Some(v) = depth
            .iter()
            .chain(&intensity)
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfRange(format!(
                "channel value {v} not in [0, 1]"
            )));
        }
        Ok(RangeImage {
            height,
            width,
            depth,
            intensity,
            mask,
        })
    }

    /// Builds an image from unconstrained channel values (e.g. a generated
    /// sample): values are clamped to `[0, 1]` and the mask is derived from
    /// the depth threshold `cfg.min_depth`.
    pub fn from_generated(cfg: &ProjectionConfig, depth: &[f64], intensity: &[f64]) -> Self {
        let v_min = (cfg.min_depth + 1.0).log2() / cfg.depth_log_divisor;
        let depth: Vec<f32> = depth.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        let intensity = intensity.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        let mask = depth.iter().map(|&v| v as f64 >= v_min).collect();
        RangeImage {
            height: cfg.height,
            width: cfg.width,
            depth,
            intensity,
            mask,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn intensity(&self) -> &[f32] {
        &self.intensity
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn pixel(&self, row: usize, col: usize) -> (f32, f32, bool) {
        let i = self.index(row, col);
        (self.depth[i], self.intensity[i], self.mask[i])
    }

    /// Writes a return. Values are clamped into `[0, 1]`.
    pub fn set_pixel(&mut self, row: usize, col: usize, depth: f64, intensity: f64) {
        let i = self.index(row, col);
        self.depth[i] = depth.clamp(0.0, 1.0) as f32;
        self.intensity[i] = intensity.clamp(0.0, 1.0) as f32;
        self.mask[i] = true;
    }

    pub fn clear_pixel(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.depth[i] = 0.0;
        self.intensity[i] = 0.0;
        self.mask[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `[1, 2, H, W]` tensor of (depth, intensity).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.depth.len());
        data.extend(self.depth.iter().map(|&v| v as f64));
        data.extend(self.intensity.iter().map(|&v| v as f64));
        Tensor::from_vec([1, 2, self.height, self.width], data).expect("shape is consistent")
    }

    /// Splits a `[n, 2, H, W]` tensor into generated images.
    pub fn batch_from_tensor(cfg: &ProjectionConfig, t: &Tensor) -> Result<Vec<RangeImage>> {
        let [n, c, h, w] = t.shape();
        if c != 2 || h != cfg.height || w != cfg.width {
            return Err(Error::ShapeMismatch {
                expected: format!("[_, 2, {}, {}]", cfg.height, cfg.width),
                got: format!("{:?}", t.shape()),
            });
        }
        Ok((0..n)
            .map(|i| RangeImage::from_generated(cfg, t.plane(i, 0), t.plane(i, 1)))
            .collect())
    }

    pub fn batch_to_tensor(images: &[RangeImage]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images.iter().map(RangeImage::to_tensor).collect();
        Tensor::stack(&parts)
    }
}

/// Rasterizes `pc`. Returns the image and, per pixel, the index of the point
/// that was kept there.
pub fn project_with_sources(
    pc: &PointCloud,
    cfg: &ProjectionConfig,
) -> Result<(RangeImage, Vec<Option<usize>>)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (i, (p, _)) in pc.iter().enumerate() {
        let s = cart_to_sph(p)?;
        if s.range < cfg.min_depth {
            continue;
        }
        let Some((row, col)) = cfg.pixel_of(s.inclination, s.azimuth) else {
            continue;
        };
        let slot = &mut best[row * w + col];
        // Strictly-nearer replaces; equal depth keeps the lower index.
        if slot.is_none_or(|(d, _)| s.range < d) {
            *slot = Some((s.range, i));
        }
    }
    let mut img = RangeImage::empty(h, w);
    let intensities = pc.intensities();
    for (pix, slot) in best.iter().enumerate() {
        if let Some((d, i)) = *slot {
            let v = cfg.encode_depth(d)?;
            let r = intensities[i] / cfg.intensity_divisor;
            img.set_pixel(pix / w, pix % w, v, r);
        }
    }
    Ok((img, best.into_iter().map(|s| s.map(|(_, i)| i)).collect()))
}

pub fn project(pc: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    project_with_sources(pc, cfg).map(|(img, _)| img)
}

/// Emits one point per returned pixel at the pixel-center direction.
/// Pixels decoding below `cfg.min_depth` are ray drop.
pub fn unproject(img: &RangeImage, cfg: &ProjectionConfig) -> Result<PointCloud> {
    cfg.validate()?;
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", cfg.height, cfg.width),
            got: format!("{}x{}", img.height(), img.width()),
        });
    }
    let mut pc = PointCloud::with_capacity(img.valid_count());
    for row in 0..cfg.height {
        let theta = cfg.row_center(row);
        for col in 0..cfg.width {
            let (v, r, m) = img.pixel(row, col);
            if !m {
                continue;
            }
            let d = cfg.decode_depth(v as f64)?;
            if d < cfg.min_depth {
                continue;
            }
            let p = sph_to_cart(SphericalPoint {
                inclination: theta,
                azimuth: cfg.col_center(col),
                range: d,
            });
            pc.push(p, r as f64 * cfg.intensity_divisor)?;
        }
    }
    Ok(pc)
}
