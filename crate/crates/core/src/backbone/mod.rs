//! The hybrid VAE generator and its patch discriminator.
//!
//! Each coder interleaves strided (or upsampling) convolutions with residual
//! blocks and places its non-local attention block at the lowest resolution.

mod config;
mod conv;
mod latent;
mod layers;
mod model;
mod params;

pub use config::ModelConfig;
pub use conv::{conv2d, upsample2x};
pub use latent::{standard_normal, LatentDistribution, LatentSample};
pub use layers::{group_count, leaky_relu, softmax_last_dim, Conv2d, GroupNorm, NonLocalAttention, ResBlock};
pub use model::{
    decoder_prefix, FdaVae, ParamScope, Phase, DECODER_A, DECODER_B, DISCRIMINATOR, ENCODER,
    LOG_VARIANCE_RANGE,
};
pub use params::ParamStore;
