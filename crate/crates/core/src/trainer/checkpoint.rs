//! Binary checkpoint: magic, format version, a JSON header describing every
//! tensor, then the tensors as little-endian f32 in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, Moments};
use super::{EpochAccumulator, TrainConfig, TrainState};
use crate::backbone::{FdaVae, ModelConfig, ParamStore};
use crate::error::{CheckpointError, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDAVAECK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 word position, as a decimal string.
    word_pos: String,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    GeneratorM,
    GeneratorV,
    DiscriminatorM,
    DiscriminatorV,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    slot: Slot,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    epoch: u64,
    batch_in_epoch: u64,
    best_val_psnr: Option<f64>,
    generator_steps: u64,
    discriminator_steps: u64,
    rng: RngState,
    accumulator: EpochAccumulator,
    tensors: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    CheckpointError::Corrupt(msg.into()).into()
}

/// Writes `state` to `path` through a temporary file and a rename, so a
/// failed write never leaves a partial checkpoint under `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |slot: Slot, name: &str, t: &Tensor| -> Result<()> {
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        payload.extend(values.iter().flat_map(|v| v.to_le_bytes()));
        entries.push(Entry {
            slot,
            name: name.to_string(),
            shape: t.dims().to_vec(),
        });
        Ok(())
    };
    for (name, var) in state.model.params().iter() {
        push(Slot::Param, name, var.as_tensor())?;
    }
    for (opt, (ms, vs)) in [
        (&state.generator_opt, (Slot::GeneratorM, Slot::GeneratorV)),
        (
            &state.discriminator_opt,
            (Slot::DiscriminatorM, Slot::DiscriminatorV),
        ),
    ] {
        for (name, m) in opt.moments() {
            push(ms, name, &m.m)?;
            push(vs, name, &m.v)?;
        }
    }
    let header = Header {
        model: state.model.config().clone(),
        train: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        batch_in_epoch: state.batch_in_epoch,
        best_val_psnr: state.best_val_psnr,
        generator_steps: state.generator_opt.steps(),
        discriminator_steps: state.discriminator_opt.steps(),
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        accumulator: state.accumulator,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint with the model configuration stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    load(path, None)
}

/// Loads a checkpoint into a model built from `expected`. A layout mismatch
/// reports the first offending parameter name.
pub fn load_checkpoint_with(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    load(path, Some(expected))
}

fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &body[header_len..];
    let expected_len: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected_len {
        return Err(corrupt(format!(
            "payload is {} bytes, header describes {expected_len}",
            payload.len()
        )));
    }

    let device = candle_core::Device::Cpu;
    let mut offset = 0;
    let mut params = ParamStore::default();
    let mut moments: [BTreeMap<String, (Option<Tensor>, Option<Tensor>)>; 2] = Default::default();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let values: Vec<f32> = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        let t = Tensor::from_vec(values, e.shape.as_slice(), &device)?;
        let slot =
            |i: usize, first: bool, moments: &mut [BTreeMap<_, (Option<Tensor>, Option<Tensor>)>; 2]| {
                let entry = moments[i].entry(e.name.clone()).or_default();
                if first {
                    entry.0 = Some(t.clone());
                } else {
                    entry.1 = Some(t.clone());
                }
            };
        match e.slot {
            Slot::Param => params.insert(e.name.clone(), Var::from_tensor(&t)?),
            Slot::GeneratorM => slot(0, true, &mut moments),
            Slot::GeneratorV => slot(0, false, &mut moments),
            Slot::DiscriminatorM => slot(1, true, &mut moments),
            Slot::DiscriminatorV => slot(1, false, &mut moments),
        }
    }

    let config = expected.cloned().unwrap_or_else(|| header.model.clone());
    let model = FdaVae::from_params(config.clone(), &params)?;
    if config != header.model {
        return Err(CheckpointError::ConfigMismatch(format!(
            "checkpoint was written for {:?}, caller expects {:?}",
            header.model, config
        ))
        .into());
    }
    let mut state = TrainState::from_model(model, header.train);
    let restore =
        |opt: &mut Adam, steps: u64, map: BTreeMap<String, (Option<Tensor>, Option<Tensor>)>| -> Result<()> {
            let mut out = BTreeMap::new();
            for (name, (m, v)) in map {
                match (m, v) {
                    (Some(m), Some(v)) => {
                        out.insert(name, Moments { m, v });
                    }
                    _ => return Err(corrupt(format!("incomplete optimizer moments for `{name}`"))),
                }
            }
            opt.restore(steps, out);
            Ok(())
        };
    let [gen, disc] = moments;
    restore(&mut state.generator_opt, header.generator_steps, gen)?;
    restore(&mut state.discriminator_opt, header.discriminator_steps, disc)?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| corrupt("bad rng word position"))?;
    let mut rng = ChaCha8Rng::from_seed(header.rng.seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.step = header.step;
    state.epoch = header.epoch;
    state.batch_in_epoch = header.batch_in_epoch;
    state.best_val_psnr = header.best_val_psnr;
    state.accumulator = header.accumulator;
    Ok(state)
}
