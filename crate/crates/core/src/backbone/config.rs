use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the encoder, both decoders and the discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// (height, width) of input images.
    pub input_size: (usize, usize),
    pub base_channels: usize,
    /// Channel width at depth i is `base_channels * min(2^i, max_channel_multiplier)`.
    pub max_channel_multiplier: usize,
    pub latent_channels: usize,
    /// Each stage halves both spatial dims.
    pub downsample_stages: usize,
    pub residual_blocks_per_coder: usize,
    pub attention_blocks_per_coder: usize,
    pub discriminator_stages: usize,
    pub discriminator_channels: usize,
    /// Feed the source image to the discriminator alongside the judged image.
    pub conditional_discriminator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(32)
    }
}

impl ModelConfig {
    /// Layout with three residual blocks and one non-local block per coder,
    /// at 256x256 and a width that puts the generator near 11.8M parameters.
    pub fn full_size() -> Self {
        Self {
            input_size: (256, 256),
            base_channels: 64,
            max_channel_multiplier: 4,
            latent_channels: 8,
            downsample_stages: 3,
            residual_blocks_per_coder: 3,
            attention_blocks_per_coder: 1,
            discriminator_stages: 3,
            discriminator_channels: 64,
            conditional_discriminator: false,
        }
    }

    /// Same block types at a small width and a single downsampling stage,
    /// sized for CPU-scale experiments.
    pub fn desk(size: usize) -> Self {
        Self {
            input_size: (size, size),
            base_channels: 8,
            max_channel_multiplier: 4,
            latent_channels: 4,
            downsample_stages: 1,
            residual_blocks_per_coder: 3,
            attention_blocks_per_coder: 1,
            discriminator_stages: 2,
            discriminator_channels: 8,
            conditional_discriminator: false,
        }
    }

    pub fn channels_at(&self, depth: usize) -> usize {
        let mult = 1usize
            .checked_shl(depth as u32)
            .unwrap_or(usize::MAX)
            .min(self.max_channel_multiplier);
        self.base_channels * mult
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.downsample_stages
    }

    /// (channels, height, width) of one sample's latent map.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let f = self.downsample_factor();
        (self.latent_channels, self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn discriminator_output_size(&self) -> (usize, usize) {
        let f = 1 << self.discriminator_stages;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (h, w) = self.input_size;
        if self.base_channels == 0 || self.latent_channels == 0 || self.discriminator_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.max_channel_multiplier == 0 {
            return bad("max_channel_multiplier must be positive".into());
        }
        if self.downsample_stages == 0 || self.downsample_stages > 8 {
            return bad(format!(
                "downsample_stages must be in 1..=8, got {}",
                self.downsample_stages
            ));
        }
        if self.discriminator_stages == 0 || self.discriminator_stages > 8 {
            return bad(format!(
                "discriminator_stages must be in 1..=8, got {}",
                self.discriminator_stages
            ));
        }
        if h < 8 || w < 8 {
            return bad(format!("input size must be at least 8x8, got {h}x{w}"));
        }
        let f = self.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return bad(format!(
                "input size {h}x{w} not divisible by 2^{}",
                self.downsample_stages
            ));
        }
        let fd = 1 << self.discriminator_stages;
        if h % fd != 0 || w % fd != 0 {
            return bad(format!(
                "input size {h}x{w} not divisible by 2^{} (discriminator)",
                self.discriminator_stages
            ));
        }
        Ok(())
    }
}
