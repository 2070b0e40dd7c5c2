use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::conv::upsample2x;
use super::latent::LatentDistribution;
use super::layers::{leaky_relu, Conv2d, GroupNorm, NonLocalAttention, ResBlock};
use super::params::{Builder, ParamStore, Source};
use crate::error::{Error, Result};

/// Bounds applied to the encoder's log-variance so that exp() stays finite.
pub const LOG_VARIANCE_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
}

impl Phase {
    pub fn other(self) -> Self {
        match self {
            Phase::A => Phase::B,
            Phase::B => Phase::A,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Phase::A),
            "B" | "b" => Ok(Phase::B),
            other => Err(Error::Config(format!("unknown phase tag `{other}`"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamScope {
    Generator,
    Discriminator,
    All,
}

pub const ENCODER: &str = "encoder";
pub const DECODER_A: &str = "decoder_a";
pub const DECODER_B: &str = "decoder_b";
pub const DISCRIMINATOR: &str = "discriminator";

pub fn decoder_prefix(phase: Phase) -> &'static str {
    match phase {
        Phase::A => DECODER_A,
        Phase::B => DECODER_B,
    }
}

/// Number of interleaved steps per coder; step i holds down/up stage i (if any)
/// and residual block i (if any).
fn coder_steps(c: &ModelConfig) -> usize {
    c.downsample_stages.max(c.residual_blocks_per_coder)
}

#[derive(Debug, Clone)]
struct CoderStep {
    resample: Option<Conv2d>,
    res: Option<ResBlock>,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    steps: Vec<CoderStep>,
    attention: Vec<NonLocalAttention>,
    head_norm: GroupNorm,
    head: Conv2d,
    latent_channels: usize,
}

impl Encoder {
    fn new(b: &mut Builder, c: &ModelConfig) -> Result<Self> {
        let stem = Conv2d::new(b, "stem", 1, c.channels_at(0), 3, 1, 1)?;
        let mut depth = 0;
        let mut steps = Vec::new();
        for i in 0..coder_steps(c) {
            let resample = if i < c.downsample_stages {
                let (ci, co) = (c.channels_at(depth), c.channels_at(depth + 1));
                depth += 1;
                Some(Conv2d::new(b, &format!("down{i}"), ci, co, 3, 2, 1)?)
            } else {
                None
            };
            let res = if i < c.residual_blocks_per_coder {
                Some(ResBlock::new(b, &format!("res{i}"), c.channels_at(depth))?)
            } else {
                None
            };
            steps.push(CoderStep { resample, res });
        }
        let ch = c.channels_at(depth);
        let attention = (0..c.attention_blocks_per_coder)
            .map(|i| NonLocalAttention::new(b, &format!("attn{i}"), ch))
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            steps,
            attention,
            head_norm: GroupNorm::new(b, "head_norm", ch)?,
            head: Conv2d::new(b, "head", ch, 2 * c.latent_channels, 3, 1, 1)?,
            latent_channels: c.latent_channels,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<LatentDistribution> {
        let mut h = self.stem.forward(x)?;
        for step in &self.steps {
            if let Some(down) = &step.resample {
                h = down.forward(&h)?;
            }
            if let Some(res) = &step.res {
                h = res.forward(&h)?;
            }
        }
        for attn in &self.attention {
            h = attn.forward(&h)?;
        }
        let out = self.head.forward(&self.head_norm.forward(&h)?.silu()?)?;
        let l = self.latent_channels;
        let mean = out.narrow(1, 0, l)?;
        let log_variance = out
            .narrow(1, l, l)?
            .clamp(LOG_VARIANCE_RANGE.0, LOG_VARIANCE_RANGE.1)?;
        LatentDistribution::new(mean, log_variance)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Conv2d,
    attention: Vec<NonLocalAttention>,
    steps: Vec<CoderStep>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Decoder {
    fn new(b: &mut Builder, c: &ModelConfig) -> Result<Self> {
        let mut depth = c.downsample_stages;
        let ch = c.channels_at(depth);
        let input = Conv2d::new(b, "input", c.latent_channels, ch, 3, 1, 1)?;
        let attention = (0..c.attention_blocks_per_coder)
            .map(|i| NonLocalAttention::new(b, &format!("attn{i}"), ch))
            .collect::<Result<_>>()?;
        let mut steps = Vec::new();
        for i in (0..coder_steps(c)).rev() {
            let res = if i < c.residual_blocks_per_coder {
                Some(ResBlock::new(b, &format!("res{i}"), c.channels_at(depth))?)
            } else {
                None
            };
            let resample = if i < c.downsample_stages {
                let (ci, co) = (c.channels_at(depth), c.channels_at(depth - 1));
                depth -= 1;
                Some(Conv2d::new(b, &format!("up{i}"), ci, co, 3, 1, 1)?)
            } else {
                None
            };
            steps.push(CoderStep { resample, res });
        }
        let ch0 = c.channels_at(0);
        Ok(Self {
            input,
            attention,
            steps,
            head_norm: GroupNorm::new(b, "head_norm", ch0)?,
            head: Conv2d::new(b, "head", ch0, 1, 3, 1, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(z)?;
        for attn in &self.attention {
            h = attn.forward(&h)?;
        }
        for step in &self.steps {
            if let Some(res) = &step.res {
                h = res.forward(&h)?;
            }
            if let Some(up) = &step.resample {
                h = up.forward(&upsample2x(&h)?)?;
            }
        }
        Ok(self.head.forward(&self.head_norm.forward(&h)?.silu()?)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
struct Discriminator {
    stages: Vec<(Conv2d, Option<GroupNorm>)>,
    head: Conv2d,
}

impl Discriminator {
    fn new(b: &mut Builder, c: &ModelConfig) -> Result<Self> {
        let mut ch_in = if c.conditional_discriminator { 2 } else { 1 };
        let mut stages = Vec::new();
        for i in 0..c.discriminator_stages {
            let ch_out = c.discriminator_channels * (1 << i.min(3));
            let conv = Conv2d::new(b, &format!("down{i}"), ch_in, ch_out, 4, 2, 1)?;
            let norm = if i > 0 {
                Some(GroupNorm::new(b, &format!("norm{i}"), ch_out)?)
            } else {
                None
            };
            stages.push((conv, norm));
            ch_in = ch_out;
        }
        Ok(Self {
            stages,
            head: Conv2d::new(b, "head", ch_in, 1, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, norm) in &self.stages {
            h = conv.forward(&h)?;
            if let Some(norm) = norm {
                h = norm.forward(&h)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        self.head.forward(&h)
    }
}

/// Shared encoder, phase-specific decoders and a patch discriminator.
#[derive(Debug, Clone)]
pub struct FdaVae {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder_a: Decoder,
    decoder_b: Decoder,
    discriminator: Discriminator,
    device: Device,
}

impl FdaVae {
    /// Builds a freshly initialized model; initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Source::Init(&mut rng))
    }

    /// Builds a model around existing parameters, failing on any missing,
    /// extra or misshapen parameter.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        Self::build(config, Source::Load(params))
    }

    fn build(config: ModelConfig, source: Source) -> Result<Self> {
        let device = Device::Cpu;
        let mut b = Builder::new(source, &device);
        let encoder = b.scoped(ENCODER, |b| Encoder::new(b, &config))?;
        let decoder_a = b.scoped(DECODER_A, |b| Decoder::new(b, &config))?;
        let decoder_b = b.scoped(DECODER_B, |b| Decoder::new(b, &config))?;
        let discriminator = b.scoped(DISCRIMINATOR, |b| Discriminator::new(b, &config))?;
        let params = b.finish()?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder_a,
            decoder_b,
            discriminator,
            device,
        })
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Self::from_params(self.config.clone(), &self.params.deep_clone()?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_images(&self, x: &Tensor, context: &str) -> Result<()> {
        let (h, w) = self.config.input_size;
        match x.dims() {
            [_, 1, xh, xw] if (*xh, *xw) == (h, w) => Ok(()),
            dims => Err(Error::shape(context, ("N", 1, h, w), dims)),
        }
    }

    /// Encodes an `(N, 1, H, W)` batch into a latent Gaussian.
    pub fn encode(&self, x: &Tensor) -> Result<LatentDistribution> {
        self.check_images(x, "encode")?;
        self.encoder.forward(x)
    }

    /// Decodes an `(N, C, h, w)` latent batch with the decoder of `phase`.
    pub fn decode(&self, phase: Phase, z: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.config.latent_shape();
        match z.dims() {
            [_, zc, zh, zw] if (*zc, *zh, *zw) == (c, h, w) => {}
            dims => return Err(Error::shape("decode", ("N", c, h, w), dims)),
        }
        match phase {
            Phase::A => self.decoder_a.forward(z),
            Phase::B => self.decoder_b.forward(z),
        }
    }

    /// Patch logits of shape `(N, 1, H / 2^d, W / 2^d)`. A conditional
    /// discriminator requires the source image as `condition`.
    pub fn discriminate(&self, x: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        self.check_images(x, "discriminate")?;
        let input = match (self.config.conditional_discriminator, condition) {
            (false, _) => x.clone(),
            (true, Some(c)) => {
                self.check_images(c, "discriminate condition")?;
                Tensor::cat(&[x, c], 1)?
            }
            (true, None) => {
                return Err(Error::Config(
                    "conditional discriminator needs the source image".into(),
                ))
            }
        };
        self.discriminator.forward(&input)
    }

    pub fn count_parameters(&self, scope: ParamScope) -> usize {
        let p = &self.params;
        match scope {
            ParamScope::Generator => {
                p.element_count(ENCODER) + p.element_count(DECODER_A) + p.element_count(DECODER_B)
            }
            ParamScope::Discriminator => p.element_count(DISCRIMINATOR),
            ParamScope::All => p.element_count(""),
        }
    }
}
