//! Loss terms and their weighted combination.
//!
//! Every latent term is MEAN-reduced over elements and batch so that the
//! weights carry over between latent sizes.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conv2d, LatentDistribution};
use crate::error::{Error, Result};
use crate::image::Image;

/// Closed-form `KL(N(mean, var) || N(0, 1))`, averaged over all elements:
/// `0.5 * mean(mean^2 + var - log var - 1)`.
pub fn kl_to_standard_normal(dist: &LatentDistribution) -> Result<Tensor> {
    let lv = &dist.log_variance;
    let terms = ((dist.mean.sqr()? + lv.exp()?)? - lv)?;
    Ok(((terms - 1.0)?.mean_all()? * 0.5)?)
}

/// Flip-alignment penalty `mean|mu_a + mu_b| + mean|var_a - var_b|`; zero exactly
/// when the two Gaussians are mirror images about the origin.
pub fn fda_loss(a: &LatentDistribution, b: &LatentDistribution) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("fda_loss", a.dims(), b.dims()));
    }
    let mean_term = (&a.mean + &b.mean)?.abs()?.mean_all()?;
    let var_term = (a.variance()? - b.variance()?)?.abs()?.mean_all()?;
    Ok((mean_term + var_term)?)
}

pub fn l1_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::shape("l1_loss", target.dims(), prediction.dims()));
    }
    Ok((prediction - target)?.abs()?.mean_all()?)
}

/// Least-squares generator term `mean((D(fake) - 1)^2)`.
pub fn gan_loss_generator(fake_logits: &Tensor) -> Result<Tensor> {
    Ok((fake_logits - 1.0)?.sqr()?.mean_all()?)
}

/// Least-squares discriminator term `0.5 mean((D(real) - 1)^2) + 0.5 mean(D(fake)^2)`.
pub fn gan_loss_discriminator(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (real_logits - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_logits.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// A fixed feature stack for perceptual comparisons.
pub trait FeatureExtractor: Send + Sync {
    /// Feature maps of the selected layers for an `(N, 1, H, W)` batch.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    fn name(&self) -> &str;
}

/// Frozen, randomly initialized convolutional features.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    layers: Vec<Conv2d>,
    seed: u64,
}

impl RandomConvFeatures {
    pub const DEFAULT_SEED: u64 = 0;
    /// (in, out, stride) per 3x3 layer; every layer's ReLU output is compared.
    pub const LAYOUT: [(usize, usize, usize); 3] = [(1, 8, 1), (8, 16, 2), (16, 16, 2)];
    pub const MIN_INPUT: usize = 4;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::LAYOUT
            .iter()
            .map(|&(ci, co, stride)| {
                // Unit-variance scale so that deeper features stay O(1).
                let bound = (3.0 / (ci * 9) as f64).sqrt();
                let w: Vec<f32> = (0..co * ci * 9)
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect();
                let b: Vec<f32> = (0..co).map(|_| rng.random_range(-0.1..0.1)).collect();
                Conv2d::from_tensors(
                    Tensor::from_vec(w, (co, ci, 3, 3), &Device::Cpu).expect("static shape"),
                    Tensor::from_vec(b, co, &Device::Cpu).expect("static shape"),
                    stride,
                    1,
                )
            })
            .collect();
        Self { layers, seed }
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h < Self::MIN_INPUT || w < Self::MIN_INPUT {
            return Err(Error::shape(
                "perceptual extractor input",
                format!("(N, 1, >={m}, >={m})", m = Self::MIN_INPUT),
                x.dims(),
            ));
        }
        let mut h = x.to_dtype(DType::F32)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        "random_conv"
    }
}

/// Sum over extractor layers of the mean absolute feature difference.
pub fn perceptual_loss(
    prediction: &Tensor,
    target: &Tensor,
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::shape("perceptual_loss", target.dims(), prediction.dims()));
    }
    let fp = extractor.features(prediction)?;
    let ft = extractor.features(target)?;
    let mut total = Tensor::zeros((), DType::F32, prediction.device())?;
    for (p, t) in fp.iter().zip(&ft) {
        total = (total + (p - t)?.abs()?.mean_all()?)?;
    }
    Ok(total)
}

/// Perceptual distance between two single images.
pub fn perceptual_distance(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let d = Device::Cpu;
    let v: f32 = perceptual_loss(&a.to_tensor(&d)?, &b.to_tensor(&d)?, extractor)?.to_scalar()?;
    Ok(v as f64)
}

/// Coefficients of the weighted objective; the translation term has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_gan: f64,
    pub lambda_perce: f64,
    pub lambda_kl: f64,
    pub lambda_fda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1e-2,
            lambda_gan: 1e-2,
            lambda_perce: 1e-2,
            lambda_kl: 1e-7,
            lambda_fda: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_gan", self.lambda_gan),
            ("lambda_perce", self.lambda_perce),
            ("lambda_kl", self.lambda_kl),
            ("lambda_fda", self.lambda_fda),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(Error::Config(format!("{name} must be >= 0, got {v}"))),
            None => Ok(()),
        }
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub trans: f64,
    pub gan: f64,
    pub perce: f64,
    pub kl: f64,
    pub fda: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rec", self.rec),
            ("trans", self.trans),
            ("gan", self.gan),
            ("perce", self.perce),
            ("kl", self.kl),
            ("fda", self.fda),
        ]
    }
}

/// Raw components plus their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub trans: f64,
    pub gan: f64,
    pub perce: f64,
    pub kl: f64,
    pub fda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            rec: self.rec,
            trans: self.trans,
            gan: self.gan,
            perce: self.perce,
            kl: self.kl,
            fda: self.fda,
        }
    }
}

/// `lambda_rec*rec + trans + lambda_gan*gan + lambda_perce*perce + lambda_kl*kl + lambda_fda*fda`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    if let Some((name, v)) = parts.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            step: None,
            component: name.to_string(),
            value: v,
        });
    }
    let total = weights.lambda_rec * parts.rec
        + parts.trans
        + weights.lambda_gan * parts.gan
        + weights.lambda_perce * parts.perce
        + weights.lambda_kl * parts.kl
        + weights.lambda_fda * parts.fda;
    if !total.is_finite() {
        return Err(Error::Divergence {
            step: None,
            component: "total".into(),
            value: total,
        });
    }
    Ok(LossBreakdown {
        rec: parts.rec,
        trans: parts.trans,
        gan: parts.gan,
        perce: parts.perce,
        kl: parts.kl,
        fda: parts.fda,
        total,
    })
}

/// Scalar loss tensors that still carry the autograd graph.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub rec: Tensor,
    pub trans: Tensor,
    pub gan: Tensor,
    pub perce: Tensor,
    pub kl: Tensor,
    pub fda: Tensor,
}

impl LossTensors {
    /// Differentiable weighted total, using the same coefficients as [`total_loss`].
    pub fn weighted_total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = (&self.trans
            + (&self.rec * w.lambda_rec)?
            + (&self.gan * w.lambda_gan)?
            + (&self.perce * w.lambda_perce)?
            + (&self.kl * w.lambda_kl)?
            + (&self.fda * w.lambda_fda)?)?;
        Ok(t)
    }

    pub fn values(&self) -> Result<LossParts> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossParts {
            rec: s(&self.rec)?,
            trans: s(&self.trans)?,
            gan: s(&self.gan)?,
            perce: s(&self.perce)?,
            kl: s(&self.kl)?,
            fda: s(&self.fda)?,
        })
    }
}
