use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::history::{append_history, HistoryRow};
use super::{train_step, TrainConfig, TrainState};
use crate::backbone::{FdaVae, ModelConfig};
use crate::error::{Error, Result};
use crate::evalkit::{latent_symmetry_report, neumaier_sum, psnr, ssim, SsimParams, SIGNED_UNIT_RANGE};
use crate::image::Image;
use crate::objectives::RandomConvFeatures;
use crate::phantoms::PhasePair;
use crate::synthesis::{synthesize_batch, Direction, InferenceMode, INFERENCE_CHUNK};

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.bin";
pub const LAST_CHECKPOINT: &str = "last.bin";
pub const RUN_SNAPSHOT: &str = "run.json";
pub const INITIAL_VALIDATION_FILE: &str = "initial_validation.json";

/// Shuffle streams start here so they never collide with the noise stream.
const EPOCH_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where history, checkpoints and snapshots go; nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Return once this many epochs are complete, as if interrupted.
    pub stop_after_epoch: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean `|mu_A + mu_B|` over the validation pairs.
    pub symmetry: f64,
}

impl ValidationMetrics {
    const MISSING: ValidationMetrics = ValidationMetrics {
        psnr: f64::NAN,
        ssim: f64::NAN,
        symmetry: f64::NAN,
    };
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Rows produced by this call.
    pub history: Vec<HistoryRow>,
    /// Validation before the first step; `None` when resuming.
    pub initial: Option<ValidationMetrics>,
}

/// Batch order of `epoch`: a permutation determined by `(seed, epoch)` alone.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM_BASE + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Deterministic-mode PSNR/SSIM over `directions` and the latent symmetry
/// score. Metrics are averaged over every (pair, direction) evaluation.
pub fn validate(model: &FdaVae, pairs: &[PhasePair], directions: &[Direction]) -> Result<ValidationMetrics> {
    if pairs.is_empty() {
        return Ok(ValidationMetrics::MISSING);
    }
    let params = SsimParams::default();
    let mut p = Vec::new();
    let mut s = Vec::new();
    for &d in directions {
        for chunk in pairs.chunks(INFERENCE_CHUNK) {
            let (inputs, targets): (Vec<&Image>, Vec<&Image>) = chunk.iter().map(|x| d.select(x)).unzip();
            let outputs = synthesize_batch(model, &inputs, d, InferenceMode::Deterministic)?;
            for (out, target) in outputs.iter().zip(targets) {
                p.push(psnr(out, target, SIGNED_UNIT_RANGE)?);
                s.push(ssim(out, target, &params)?);
            }
        }
    }
    let n = p.len() as f64;
    Ok(ValidationMetrics {
        psnr: neumaier_sum(p) / n,
        ssim: neumaier_sum(s) / n,
        symmetry: latent_symmetry_report(model, pairs)?.mean_abs_mu_sum,
    })
}

#[derive(Serialize)]
struct Snapshot<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    train_pairs: usize,
    validation_pairs: usize,
}

fn check_sizes(model: &FdaVae, pairs: &[PhasePair], what: &str) -> Result<()> {
    let want = model.config().input_size;
    match pairs.iter().find(|p| p.dims() != want) {
        Some(p) => Err(Error::Sample {
            sample_id: p.sample_id.clone(),
            message: format!("{what} image is {:?}, model expects {:?}", p.dims(), want),
        }),
        None => Ok(()),
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[PhasePair],
    val_set: &[PhasePair],
    options: &RunOptions,
) -> Result<TrainOutcome> {
    let state = TrainState::new(model_config.clone(), config.clone())?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    check_sizes(&state.model, train_set, "training")?;
    check_sizes(&state.model, val_set, "validation")?;
    let initial = validate(&state.model, val_set, config.ablation_mode.directions())?;
    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = Snapshot {
            model: model_config,
            train: config,
            train_pairs: train_set.len(),
            validation_pairs: val_set.len(),
        };
        write_json(&dir.join(RUN_SNAPSHOT), &snapshot)?;
        write_json(&dir.join(INITIAL_VALIDATION_FILE), &initial)?;
        let history = dir.join(HISTORY_FILE);
        if history.exists() {
            fs::remove_file(&history).map_err(|e| Error::io(&history, e))?;
        }
    }
    let mut out = resume(state, train_set, val_set, options)?;
    out.initial = Some(initial);
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Continues training `state` until `state.config.epochs` epochs are done
/// (or `options.stop_after_epoch`). Rows are appended to the run directory's
/// history file.
pub fn resume(
    mut state: TrainState,
    train_set: &[PhasePair],
    val_set: &[PhasePair],
    options: &RunOptions,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    check_sizes(&state.model, train_set, "training")?;
    check_sizes(&state.model, val_set, "validation")?;
    let extractor = RandomConvFeatures::default();
    let config = state.config.clone();
    let directions = config.ablation_mode.directions();
    let dir = options.run_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut history = Vec::new();
    let stop = options
        .stop_after_epoch
        .unwrap_or(config.epochs)
        .min(config.epochs);
    while state.epoch < stop {
        let order = epoch_order(config.seed, state.epoch, train_set.len());
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for idx in &batches[state.batch_in_epoch as usize..] {
            let batch: Vec<&PhasePair> = idx.iter().map(|&i| &train_set[i]).collect();
            train_step(&mut state, &batch, &extractor)?;
            state.batch_in_epoch += 1;
            if let (Some(d), true) = (
                dir,
                config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0,
            ) {
                save_checkpoint(&state, &d.join(format!("ckpt_{}.bin", state.step)))?;
            }
        }
        let val = validate(&state.model, val_set, directions)?;
        let (means, d_loss) = state.accumulator.means();
        state.epoch += 1;
        state.batch_in_epoch = 0;
        state.accumulator = Default::default();
        let row = HistoryRow {
            epoch: state.epoch,
            step: state.step,
            rec: means.rec,
            trans: means.trans,
            gan: means.gan,
            perce: means.perce,
            kl: means.kl,
            fda: means.fda,
            total: means.total,
            d_loss,
            val_psnr: val.psnr,
            val_ssim: val.ssim,
            val_symmetry: val.symmetry,
        };
        // Without a validation set the latest epoch stands in for the best one.
        let improved =
            val_set.is_empty() || (val.psnr.is_finite() && state.best_val_psnr.is_none_or(|b| val.psnr > b));
        if improved && val.psnr.is_finite() {
            state.best_val_psnr = Some(val.psnr);
        }
        log::info!(
            "epoch {} step {} total {:.5} trans {:.5} d_loss {:.4} val_psnr {:.3} val_ssim {:.4} val_symmetry {:.4}",
            row.epoch, row.step, row.total, row.trans, row.d_loss, row.val_psnr, row.val_ssim, row.val_symmetry
        );
        if let Some(d) = dir {
            append_history(&d.join(HISTORY_FILE), &row)?;
            save_checkpoint(&state, &d.join(LAST_CHECKPOINT))?;
            if improved {
                save_checkpoint(&state, &d.join(BEST_CHECKPOINT))?;
            }
        }
        history.push(row);
    }
    Ok(TrainOutcome {
        state,
        history,
        initial: None,
    })
}
