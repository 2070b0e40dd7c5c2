//! Y-shaped bidirectional training: a shared encoder, two phase decoders
//! reached through mean flipping, and an alternating patch-discriminator update.

mod adam;
mod checkpoint;
mod history;
mod run;

pub use adam::{Adam, AdamConfig, Moments};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use history::{read_history, HistoryRow, HISTORY_HEADER};
pub use run::{
    epoch_order, resume, train, validate, RunOptions, TrainOutcome, ValidationMetrics, BEST_CHECKPOINT,
    HISTORY_FILE, INITIAL_VALIDATION_FILE, LAST_CHECKPOINT, RUN_SNAPSHOT,
};

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    FdaVae, LatentDistribution, ModelConfig, Phase, DECODER_A, DECODER_B, DISCRIMINATOR, ENCODER,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objectives::{
    fda_loss, gan_loss_discriminator, gan_loss_generator, kl_to_standard_normal, l1_loss, perceptual_loss,
    total_loss, FeatureExtractor, LossBreakdown, LossTensors, LossWeights,
};
use crate::phantoms::PhasePair;
use crate::synthesis::Direction;

/// RNG stream of the per-step latent noise.
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Encoder plus decoder B on flipped phase-A latents; no reconstruction or alignment term.
    BackboneOnly,
    /// Decoder B only: B self-reconstruction and A-to-B translation, with the alignment term.
    KlFda,
    /// Both decoders, both directions.
    Full,
}

impl AblationMode {
    /// Translation directions this mode trains.
    pub fn directions(self) -> &'static [Direction] {
        match self {
            AblationMode::Full => &Direction::ALL,
            AblationMode::BackboneOnly | AblationMode::KlFda => &[Direction::AToB],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::BackboneOnly => "backbone_only",
            AblationMode::KlFda => "kl_fda",
            AblationMode::Full => "full",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "backbone" | "backbone_only" => Ok(AblationMode::BackboneOnly),
            "kl_fda" => Ok(AblationMode::KlFda),
            "full" => Ok(AblationMode::Full),
            _ => Err(Error::Config(format!(
                "unknown ablation mode `{s}` (expected backbone, kl-fda or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Write `ckpt_<step>.bin` every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub ablation_mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            loss_weights: LossWeights::default(),
            checkpoint_every: 1000,
            ablation_mode: AblationMode::Full,
        }
    }
}

impl TrainConfig {
    /// Schedule for small CPU runs: small batches and a larger step size
    /// make up for the short run.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            epochs: 60,
            batch_size: 2,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss_weights.validate()
    }
}

/// Running sums for the per-epoch history row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub steps: u64,
    pub sums: LossBreakdown,
    pub d_loss: f64,
}

impl EpochAccumulator {
    fn add(&mut self, out: &StepOutput) {
        let (s, l) = (&mut self.sums, &out.losses);
        s.rec += l.rec;
        s.trans += l.trans;
        s.gan += l.gan;
        s.perce += l.perce;
        s.kl += l.kl;
        s.fda += l.fda;
        s.total += l.total;
        self.d_loss += out.d_loss;
        self.steps += 1;
    }

    fn means(&self) -> (LossBreakdown, f64) {
        let n = self.steps.max(1) as f64;
        let s = &self.sums;
        (
            LossBreakdown {
                rec: s.rec / n,
                trans: s.trans / n,
                gan: s.gan / n,
                perce: s.perce / n,
                kl: s.kl / n,
                fda: s.fda / n,
                total: s.total / n,
            },
            self.d_loss / n,
        )
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: FdaVae,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches already consumed in the current epoch.
    pub batch_in_epoch: u64,
    pub best_val_psnr: Option<f64>,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    pub rng: ChaCha8Rng,
    pub accumulator: EpochAccumulator,
}

impl TrainState {
    /// Fresh state: model initialized from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = FdaVae::new(model_config, config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: FdaVae, config: TrainConfig) -> Self {
        let adam = AdamConfig::with_lr(config.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        Self {
            model,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            best_val_psnr: None,
            generator_opt: Adam::new(adam, &[ENCODER, DECODER_A, DECODER_B]),
            discriminator_opt: Adam::new(adam, &[DISCRIMINATOR]),
            rng,
            accumulator: EpochAccumulator::default(),
            config,
        }
    }

    /// Independent copy, including parameters and optimizer moments.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = self.clone();
        out.model = self.model.deep_clone()?;
        for opt in [&mut out.generator_opt, &mut out.discriminator_opt] {
            let moments = opt
                .moments()
                .iter()
                .map(|(k, m)| {
                    Ok((
                        k.clone(),
                        Moments {
                            m: m.m.copy()?,
                            v: m.v.copy()?,
                        },
                    ))
                })
                .collect::<Result<_>>()?;
            opt.restore(opt.steps(), moments);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub d_loss: f64,
}

/// Generator-side forward pass of one batch.
pub struct GeneratorPass {
    pub losses: LossTensors,
    /// Translated images, the real images they should match, and the
    /// inputs they were translated from.
    pub fakes: Tensor,
    pub reals: Tensor,
    pub sources: Tensor,
}

fn split(dist: &LatentDistribution, n: usize) -> Result<(LatentDistribution, LatentDistribution)> {
    let part = |start| -> Result<LatentDistribution> {
        LatentDistribution::new(
            dist.mean.narrow(0, start, n)?,
            dist.log_variance.narrow(0, start, n)?,
        )
    };
    Ok((part(0)?, part(n)?))
}

fn batch_tensors(model: &FdaVae, batch: &[&PhasePair]) -> Result<(Tensor, Tensor)> {
    let a: Vec<&Image> = batch.iter().map(|p| &p.phase_a).collect();
    let b: Vec<&Image> = batch.iter().map(|p| &p.phase_b).collect();
    Ok((
        Image::batch_to_tensor(&a, model.device())?,
        Image::batch_to_tensor(&b, model.device())?,
    ))
}

/// Encodes, samples, decodes and evaluates every generator objective for
/// `mode`. Latent noise is drawn from `rng` in a fixed order.
pub fn generator_pass(
    model: &FdaVae,
    mode: AblationMode,
    batch: &[&PhasePair],
    rng: &mut ChaCha8Rng,
    extractor: &dyn FeatureExtractor,
) -> Result<GeneratorPass> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("training batch".into()));
    }
    let n = batch.len();
    let (xa, xb) = batch_tensors(model, batch)?;
    let zero = Tensor::zeros((), DType::F32, model.device())?;
    match mode {
        AblationMode::Full => {
            let (da, db) = split(&model.encode(&Tensor::cat(&[&xa, &xb], 0)?)?, n)?;
            let z_aa = da.sample(rng)?.values;
            let z_ab = da.flip().sample(rng)?.values;
            let z_bb = db.sample(rng)?.values;
            let z_ba = db.flip().sample(rng)?.values;
            let out_a = model.decode(Phase::A, &Tensor::cat(&[&z_aa, &z_ba], 0)?)?;
            let out_b = model.decode(Phase::B, &Tensor::cat(&[&z_bb, &z_ab], 0)?)?;
            let (x_aa, x_ba) = (out_a.narrow(0, 0, n)?, out_a.narrow(0, n, n)?);
            let (x_bb, x_ab) = (out_b.narrow(0, 0, n)?, out_b.narrow(0, n, n)?);
            let rec = ((l1_loss(&x_aa, &xa)? + l1_loss(&x_bb, &xb)?)? * 0.5)?;
            let fakes = Tensor::cat(&[&x_ab, &x_ba], 0)?;
            let reals = Tensor::cat(&[&xb, &xa], 0)?;
            let sources = Tensor::cat(&[&xa, &xb], 0)?;
            let kl = ((kl_to_standard_normal(&da)? + kl_to_standard_normal(&db)?)? * 0.5)?;
            let fda = fda_loss(&da, &db)?;
            finish(model, extractor, rec, kl, fda, fakes, reals, sources)
        }
        AblationMode::KlFda => {
            let (da, db) = split(&model.encode(&Tensor::cat(&[&xa, &xb], 0)?)?, n)?;
            let z_ab = da.flip().sample(rng)?.values;
            let z_bb = db.sample(rng)?.values;
            let out_b = model.decode(Phase::B, &Tensor::cat(&[&z_bb, &z_ab], 0)?)?;
            let (x_bb, x_ab) = (out_b.narrow(0, 0, n)?, out_b.narrow(0, n, n)?);
            let rec = l1_loss(&x_bb, &xb)?;
            let kl = ((kl_to_standard_normal(&da)? + kl_to_standard_normal(&db)?)? * 0.5)?;
            let fda = fda_loss(&da, &db)?;
            finish(model, extractor, rec, kl, fda, x_ab, xb, xa)
        }
        AblationMode::BackboneOnly => {
            let da = model.encode(&xa)?;
            let z_ab = da.flip().sample(rng)?.values;
            let x_ab = model.decode(Phase::B, &z_ab)?;
            let kl = kl_to_standard_normal(&da)?;
            finish(model, extractor, zero.clone(), kl, zero, x_ab, xb, xa)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &FdaVae,
    extractor: &dyn FeatureExtractor,
    rec: Tensor,
    kl: Tensor,
    fda: Tensor,
    fakes: Tensor,
    reals: Tensor,
    sources: Tensor,
) -> Result<GeneratorPass> {
    let trans = l1_loss(&fakes, &reals)?;
    let gan = gan_loss_generator(&model.discriminate(&fakes, Some(&sources))?)?;
    let perce = perceptual_loss(&fakes, &reals, extractor)?;
    Ok(GeneratorPass {
        losses: LossTensors {
            rec,
            trans,
            gan,
            perce,
            kl,
            fda,
        },
        fakes,
        reals,
        sources,
    })
}

fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::Divergence { component, value, .. } => Error::Divergence {
            step: Some(step),
            component,
            value,
        },
        other => other,
    }
}

/// Updates only the generator from the weighted generator objective.
pub fn generator_update(state: &mut TrainState, pass: &GeneratorPass) -> Result<LossBreakdown> {
    let step = state.step + 1;
    let breakdown =
        total_loss(&pass.losses.values()?, &state.config.loss_weights).map_err(|e| diverged(e, step))?;
    let total = pass.losses.weighted_total(&state.config.loss_weights)?;
    let grads = total.backward()?;
    state.generator_opt.step(state.model.params(), &grads)?;
    Ok(breakdown)
}

/// Discriminator loss on real targets versus detached translations.
pub fn discriminator_loss(model: &FdaVae, pass: &GeneratorPass) -> Result<Tensor> {
    let n = pass.reals.dim(0)?;
    let images = Tensor::cat(&[&pass.reals, &pass.fakes.detach()], 0)?;
    let sources = Tensor::cat(&[&pass.sources, &pass.sources], 0)?;
    let logits = model.discriminate(&images, Some(&sources))?;
    gan_loss_discriminator(&logits.narrow(0, 0, n)?, &logits.narrow(0, n, n)?)
}

/// Updates only the discriminator.
pub fn discriminator_update(state: &mut TrainState, pass: &GeneratorPass) -> Result<f64> {
    let loss = discriminator_loss(&state.model, pass)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: Some(state.step + 1),
            component: "d_loss".into(),
            value,
        });
    }
    let grads = loss.backward()?;
    state.discriminator_opt.step(state.model.params(), &grads)?;
    Ok(value)
}

/// One generator update followed by one discriminator update.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PhasePair],
    extractor: &dyn FeatureExtractor,
) -> Result<StepOutput> {
    let pass = generator_pass(
        &state.model,
        state.config.ablation_mode,
        batch,
        &mut state.rng,
        extractor,
    )?;
    let losses = generator_update(state, &pass)?;
    let d_loss = discriminator_update(state, &pass)?;
    state.step += 1;
    let out = StepOutput { losses, d_loss };
    state.accumulator.add(&out);
    Ok(out)
}

#[cfg(test)]
mod tests;
