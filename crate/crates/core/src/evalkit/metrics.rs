//! Pixel-level image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for identical images (zero MSE).
pub const PSNR_CAP_DB: f64 = 100.0;

/// Data range of images in the canonical `[-1, 1]` range.
pub const SIGNED_UNIT_RANGE: f64 = 2.0;

fn check_dims(a: &Image, b: &Image, context: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b, "mse")?;
    let sum = neumaier_sum(
        a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2)),
    );
    Ok(sum / a.pixels().len() as f64)
}

/// `10 log10(range^2 / MSE)`, or [`PSNR_CAP_DB`] when the images are identical.
pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Config(format!("data_range must be > 0, got {data_range}")));
    }
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: SIGNED_UNIT_RANGE,
        }
    }
}

impl SsimParams {
    pub fn with_range(data_range: f64) -> Self {
        Self {
            data_range,
            ..Self::default()
        }
    }

    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window_size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity with Gaussian-weighted local statistics over
/// every fully contained window position.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let (h, w) = a.dims();
    let k = params.window_size;
    if k == 0 || h < k || w < k {
        return Err(Error::shape("ssim window", format!(">= {k}x{k}"), (h, w)));
    }
    let taps = params.taps();
    let x: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, oh, ow) = filter_valid(&x, h, w, &taps);
    let (my, ..) = filter_valid(&y, h, w, &taps);
    let (mxx, ..) = filter_valid(&prod(&x, &x), h, w, &taps);
    let (myy, ..) = filter_valid(&prod(&y, &y), h, w, &taps);
    let (mxy, ..) = filter_valid(&prod(&x, &y), h, w, &taps);
    let (c1, c2) = (params.c1(), params.c2());
    let map = (0..oh * ow).map(|i| {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    });
    Ok(neumaier_sum(map) / (oh * ow) as f64)
}

/// Compensated summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = neumaier_sum(values.iter().copied()) / n;
    let var = neumaier_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;

    fn constant(v: f32) -> Image {
        Image::constant(16, 16, v, ValueRange::SIGNED_UNIT).unwrap()
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = constant(0.3);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_closed_form() {
        let a = Image::constant(8, 8, 0.5, ValueRange::new(0.0, 1.0).unwrap()).unwrap();
        let b = Image::constant(8, 8, 0.6, ValueRange::new(0.0, 1.0).unwrap()).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn psnr_rejects_bad_inputs() {
        let a = constant(0.0);
        assert!(psnr(&a, &a, 0.0).is_err());
        let b = Image::constant(8, 8, 0.0, ValueRange::SIGNED_UNIT).unwrap();
        assert!(matches!(psnr(&a, &b, 2.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = Image::from_fn(20, 24, ValueRange::SIGNED_UNIT, |r, c| {
            ((r * 7 + c * 3) % 11) as f32 / 11.0
        })
        .unwrap();
        assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (c, d) = (0.2f32, 0.3f32);
        let p = SsimParams::default();
        let (ux, uy) = (c as f64, (c + d) as f64);
        let c1 = (0.01f64 * 2.0).powi(2);
        // Zero variances and covariance: the contrast-structure factor is C2 / C2.
        let expected = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        let got = ssim(&constant(c), &constant(c + d), &p).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((expected - 0.2004 / 0.2904).abs() < 1e-6);
    }

    #[test]
    fn ssim_too_small() {
        let a = Image::constant(10, 30, 0.0, ValueRange::SIGNED_UNIT).unwrap();
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
    }

    #[test]
    fn compensated_sum() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(neumaier_sum(v), 2.0);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    fn random_image(seed: u64, size: usize) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let px = (0..size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Image::new(size, size, px, ValueRange::SIGNED_UNIT).unwrap()
    }

    #[test]
    fn psnr_matches_loop_oracle() {
        let (a, b) = (random_image(1, 32), random_image(2, 32));
        let mut sse = 0.0;
        for r in 0..32 {
            for c in 0..32 {
                let d = a.get(r, c) as f64 - b.get(r, c) as f64;
                sse += d * d;
            }
        }
        let want = 10.0 * (4.0 / (sse / 1024.0)).log10();
        assert!((psnr(&a, &b, 2.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_dense_window_oracle() {
        let (a, n) = (random_image(3, 32), random_image(4, 32));
        let b = Image::from_fn(32, 32, ValueRange::SIGNED_UNIT, |r, c| {
            (0.6 * a.get(r, c) + 0.3 * n.get(r, c)).clamp(-1.0, 1.0)
        })
        .unwrap();
        let p = SsimParams::default();
        let g = p.taps();
        let k = p.window_size;
        let mut total = 0.0;
        let mut count = 0usize;
        for y in 0..=32 - k {
            for x in 0..=32 - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = g[i] * g[j];
                        let (u, v) = (a.get(y + i, x + j) as f64, b.get(y + i, x + j) as f64);
                        mx += wgt * u;
                        my += wgt * v;
                        sxx += wgt * u * u;
                        syy += wgt * v * v;
                        sxy += wgt * u * v;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + p.c1()) * (2.0 * cxy + p.c2()))
                    / ((mx * mx + my * my + p.c1()) * (vx + vy + p.c2()));
                count += 1;
            }
        }
        let got = ssim(&a, &b, &p).unwrap();
        assert!((got - total / count as f64).abs() < 1e-6);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = random_image(5, 24);
        let noise = random_image(6, 24);
        let mut last = f64::INFINITY;
        for s in [0.01f32, 0.05, 0.1, 0.3] {
            let b = Image::from_fn(24, 24, ValueRange::SIGNED_UNIT, |r, c| {
                (a.get(r, c) + s * noise.get(r, c)).clamp(-1.0, 1.0)
            })
            .unwrap();
            let v = psnr(&a, &b, 2.0).unwrap();
            assert!(v < last);
            last = v;
        }
    }
}
