use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const PIXELS_PER_BIN: u32 = 4;

/// Black -> red -> yellow -> white ramp.
fn heat(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(t), c(t - 1.0), c(t - 2.0)])
}

/// Renders a square `bins x bins` histogram (row = y) as a log-scaled
/// heatmap with +y pointing up.
pub fn write_bev_png(path: &Path, counts: &[f64], bins: usize) -> Result<()> {
    let max = counts.iter().cloned().fold(0.0, f64::max);
    let norm = (1.0 + max).ln().max(f64::MIN_POSITIVE);
    let side = bins as u32 * PIXELS_PER_BIN;
    let img = RgbImage::from_fn(side, side, |px, py| {
        let ix = (px / PIXELS_PER_BIN) as usize;
        let iy = bins - 1 - (py / PIXELS_PER_BIN) as usize;
        heat((1.0 + counts[iy * bins + ix]).ln() / norm)
    });
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}
