use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Diagonal Gaussian over the latent map, stored as mean and log-variance.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub values: Tensor,
    pub epsilon: Tensor,
}

impl LatentDistribution {
    pub fn new(mean: Tensor, log_variance: Tensor) -> Result<Self> {
        if mean.dims() != log_variance.dims() {
            return Err(Error::shape(
                "LatentDistribution",
                mean.dims(),
                log_variance.dims(),
            ));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn dims(&self) -> &[usize] {
        self.mean.dims()
    }

    pub fn variance(&self) -> Result<Tensor> {
        Ok(self.log_variance.exp()?)
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok((&self.log_variance * 0.5)?.exp()?)
    }

    /// Negates the mean and keeps the log-variance untouched.
    pub fn flip(&self) -> Self {
        Self {
            mean: self.mean.neg().expect("negation of a valid tensor"),
            log_variance: self.log_variance.clone(),
        }
    }

    /// `mean + exp(0.5 * log_variance) * epsilon`.
    pub fn reparameterize(&self, epsilon: &Tensor) -> Result<LatentSample> {
        if epsilon.dims() != self.dims() {
            return Err(Error::shape(
                "reparameterize epsilon",
                self.dims(),
                epsilon.dims(),
            ));
        }
        let epsilon = epsilon.to_dtype(self.mean.dtype())?;
        let values = (&self.mean + (self.std()? * &epsilon)?)?;
        Ok(LatentSample { values, epsilon })
    }

    /// Reparameterizes with fresh standard-normal noise drawn from `rng`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<LatentSample> {
        let eps = standard_normal(rng, self.mean.elem_count());
        let eps = Tensor::from_vec(eps, self.dims(), self.mean.device())?;
        self.reparameterize(&eps)
    }

    /// The sample at epsilon = 0, i.e. the mean itself.
    pub fn mode(&self) -> Result<LatentSample> {
        Ok(LatentSample {
            values: self.mean.clone(),
            epsilon: self.mean.zeros_like()?,
        })
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            log_variance: self.log_variance.detach(),
        }
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
