//! Intensity clipping, min-max normalization and resizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ValueRange};

/// Empirical quantile of `values` at probability `q`, linearly interpolated
/// between order statistics at position `q * (n - 1)`.
pub fn quantile(values: &[f32], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Clamps every value above the `(1 - top_fraction)` quantile to that quantile.
pub fn clip_intensities(image: &Image, top_fraction: f64) -> Result<Image> {
    if !(0.0..0.5).contains(&top_fraction) {
        return Err(Error::Config(format!(
            "top_fraction must be in [0, 0.5), got {top_fraction}"
        )));
    }
    if top_fraction == 0.0 {
        return Ok(image.clone());
    }
    let threshold = quantile(image.pixels(), 1.0 - top_fraction) as f32;
    let pixels = image.pixels().iter().map(|&v| v.min(threshold)).collect();
    Image::new(image.height(), image.width(), pixels, image.range())
}

/// Min-max rescale into `[-1, 1]`. A constant image maps to all zeros.
pub fn normalize(image: &Image) -> Result<Image> {
    let (lo, hi) = image.min_max();
    let (h, w) = image.dims();
    let range = ValueRange::SIGNED_UNIT;
    if lo == hi {
        return Image::constant(h, w, 0.0, range);
    }
    if lo == -1.0 && hi == 1.0 {
        return Image::new(h, w, image.pixels().to_vec(), range);
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    let pixels = image
        .pixels()
        .iter()
        .map(|&v| ((2.0 * (v as f64 - lo) / span - 1.0) as f32).clamp(-1.0, 1.0))
        .collect();
    Image::new(h, w, pixels, range)
}

/// Area-averages when both dimensions shrink by integer factors, bilinear otherwise.
pub fn resize(image: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Config(format!(
            "resize target must be positive, got {target_h}x{target_w}"
        )));
    }
    let (h, w) = image.dims();
    if (h, w) == (target_h, target_w) {
        return Ok(image.clone());
    }
    let range = image.range();
    if target_h <= h && target_w <= w && h % target_h == 0 && w % target_w == 0 {
        let (fy, fx) = (h / target_h, w / target_w);
        let norm = 1.0 / (fy * fx) as f64;
        return Image::from_fn(target_h, target_w, range, |r, c| {
            let mut acc = 0.0f64;
            for y in r * fy..(r + 1) * fy {
                for x in c * fx..(c + 1) * fx {
                    acc += image.get(y, x) as f64;
                }
            }
            (acc * norm) as f32
        });
    }
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    // Half-pixel centers; edge samples are clamped.
    let coord = |i: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Image::from_fn(target_h, target_w, range, |r, c| {
        let (y0, y1, ty) = coord(r, sy, h);
        let (x0, x1, tx) = coord(c, sx, w);
        let top = image.get(y0, x0) as f64 * (1.0 - tx) + image.get(y0, x1) as f64 * tx;
        let bot = image.get(y1, x0) as f64 * (1.0 - tx) + image.get(y1, x1) as f64 * tx;
        (top * (1.0 - ty) + bot * ty) as f32
    })
}

/// Clip, normalize and resize, each step optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clip_top_fraction: f64,
    pub normalize: bool,
    pub target_size: Option<(usize, usize)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_top_fraction: 0.001,
            normalize: true,
            target_size: None,
        }
    }
}

impl PreprocessConfig {
    /// Leaves decoded images untouched.
    pub fn identity() -> Self {
        Self {
            clip_top_fraction: 0.0,
            normalize: false,
            target_size: None,
        }
    }

    pub fn with_target_size(mut self, h: usize, w: usize) -> Self {
        self.target_size = Some((h, w));
        self
    }
}

pub fn preprocess(image: &Image, config: &PreprocessConfig) -> Result<Image> {
    let mut out = clip_intensities(image, config.clip_top_fraction)?;
    if config.normalize {
        out = normalize(&out)?;
    }
    if let Some((h, w)) = config.target_size {
        out = resize(&out, h, w)?;
    }
    Ok(out)
}
