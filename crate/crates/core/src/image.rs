//! Single-channel rasters and their conversion to and from batched tensors.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval of admissible pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    /// Canonical training range.
    pub const SIGNED_UNIT: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("invalid value range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Row-major single-channel image whose pixels all lie in `range`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    range: ValueRange,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape("Image::new", height * width, pixels.len()));
        }
        if let Some((i, v)) = pixels.iter().enumerate().find(|(_, v)| !range.contains(**v)) {
            return Err(Error::Config(format!(
                "pixel {i} = {v} outside value range [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            range,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped into `range`.
    pub fn from_fn(
        height: usize,
        width: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(range.lo, range.hi));
            }
        }
        Self::new(height, width, pixels, range)
    }

    pub fn constant(height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Elementwise `|self - other|`, in range `[0, width of self.range]`.
    pub fn abs_diff(&self, other: &Image) -> Result<Image> {
        if self.dims() != other.dims() {
            return Err(Error::shape("abs_diff", self.dims(), other.dims()));
        }
        let span = self.range.width().max(other.range.width());
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs().min(span))
            .collect();
        Image::new(self.height, self.width, pixels, ValueRange { lo: 0.0, hi: span })
    }

    /// Stacks equally sized images into an `(N, 1, H, W)` f32 tensor.
    pub fn batch_to_tensor(images: &[&Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::EmptyDataset("cannot batch zero images".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.dims() != (h, w) {
                return Err(Error::shape("batch_to_tensor", (h, w), img.dims()));
            }
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], device)
    }

    /// Splits an `(N, 1, H, W)` tensor into images, clamping values into `range`.
    pub fn batch_from_tensor(tensor: &Tensor, range: ValueRange) -> Result<Vec<Image>> {
        let (n, c, h, w) = tensor.dims4()?;
        if c != 1 {
            return Err(Error::shape("batch_from_tensor channels", 1, c));
        }
        let flat: Vec<f32> = tensor
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        (0..n)
            .map(|i| {
                let px = flat[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|v| v.clamp(range.lo, range.hi))
                    .collect();
                Image::new(h, w, px, range)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let err = Image::new(1, 2, vec![0.0, 1.5], ValueRange::SIGNED_UNIT).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tensor_round_trip() {
        let a = Image::from_fn(4, 3, ValueRange::SIGNED_UNIT, |r, c| (r as f32 - c as f32) / 4.0).unwrap();
        let b = Image::constant(4, 3, 0.25, ValueRange::SIGNED_UNIT).unwrap();
        let t = Image::batch_to_tensor(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 1, 4, 3]);
        let back = Image::batch_from_tensor(&t, ValueRange::SIGNED_UNIT).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
