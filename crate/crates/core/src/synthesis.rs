//! Inference: cross-phase synthesis by mean flipping and self-reconstruction.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FdaVae, Phase};
use crate::error::{Error, Result};
use crate::evalkit::metrics::{psnr, ssim, SsimParams, SIGNED_UNIT_RANGE};
use crate::image::{Image, ValueRange};
use crate::phantoms::write_image;
use crate::phantoms::PhasePair;

/// Images per forward pass when running over a dataset.
pub const INFERENCE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a_to_b")]
    AToB,
    #[serde(rename = "b_to_a")]
    BToA,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::AToB, Direction::BToA];

    pub fn source(self) -> Phase {
        match self {
            Direction::AToB => Phase::A,
            Direction::BToA => Phase::B,
        }
    }

    pub fn target(self) -> Phase {
        self.source().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::AToB => "a_to_b",
            Direction::BToA => "b_to_a",
        }
    }

    /// `(input, target)` images of a pair for this direction.
    pub fn select(self, pair: &PhasePair) -> (&Image, &Image) {
        match self {
            Direction::AToB => (&pair.phase_a, &pair.phase_b),
            Direction::BToA => (&pair.phase_b, &pair.phase_a),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a_to_b" | "a2b" | "a->b" | "ab" => Ok(Direction::AToB),
            "b_to_a" | "b2a" | "b->a" | "ba" => Ok(Direction::BToA),
            _ => Err(Error::Config(format!(
                "unknown direction `{s}` (expected a_to_b or b_to_a)"
            ))),
        }
    }
}

/// Latent used at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InferenceMode {
    /// Decode the distribution mean (epsilon = 0).
    #[default]
    Deterministic,
    /// Decode one reparameterized draw seeded by `seed`.
    Stochastic { seed: u64 },
}

fn run(
    model: &FdaVae,
    inputs: &[&Image],
    flip: bool,
    decoder: Phase,
    mode: InferenceMode,
) -> Result<Vec<Image>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let x = Image::batch_to_tensor(inputs, model.device())?;
    let dist = model.encode(&x)?.detach();
    let dist = if flip { dist.flip() } else { dist };
    let z = match mode {
        InferenceMode::Deterministic => dist.mode()?,
        InferenceMode::Stochastic { seed } => dist.sample(&mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    let out: Tensor = model.decode(decoder, &z.values)?.detach();
    Image::batch_from_tensor(&out, ValueRange::SIGNED_UNIT)
}

/// Translates a batch into the other phase: encode, flip the mean, decode with
/// the target decoder.
pub fn synthesize_batch(
    model: &FdaVae,
    inputs: &[&Image],
    direction: Direction,
    mode: InferenceMode,
) -> Result<Vec<Image>> {
    run(model, inputs, true, direction.target(), mode)
}

pub fn synthesize_cross_phase(
    model: &FdaVae,
    x: &Image,
    direction: Direction,
    mode: InferenceMode,
) -> Result<Image> {
    Ok(synthesize_batch(model, &[x], direction, mode)?.remove(0))
}

/// Decodes the unflipped mean latent with the decoder of the input's own phase.
pub fn reconstruct_batch(model: &FdaVae, inputs: &[&Image], phase: Phase) -> Result<Vec<Image>> {
    run(model, inputs, false, phase, InferenceMode::Deterministic)
}

pub fn reconstruct_self(model: &FdaVae, x: &Image, phase: Phase) -> Result<Image> {
    Ok(reconstruct_batch(model, &[x], phase)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRow {
    pub sample_id: String,
    pub direction: Direction,
    pub psnr: f64,
    pub ssim: f64,
    pub out_path: PathBuf,
    pub err_path: PathBuf,
}

#[derive(Debug, Default)]
pub struct SynthesisReport {
    pub rows: Vec<SynthesisRow>,
    pub manifest_path: PathBuf,
    /// Samples that could not be written, with the reason.
    pub failures: Vec<(String, Error)>,
}

pub const SYNTHESIS_MANIFEST_HEADER: &str = "sample_id,direction,psnr,ssim,out_path,err_path";

/// Synthesizes every pair in `direction` (deterministic mode), writing the
/// prediction and its absolute error map per sample plus `manifest.csv`.
/// Per-sample write failures are collected rather than aborting the run.
pub fn synthesize_dataset(
    model: &FdaVae,
    pairs: &[PhasePair],
    direction: Direction,
    out_dir: &Path,
) -> Result<SynthesisReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let params = SsimParams::default();
    let mut report = SynthesisReport {
        manifest_path: out_dir.join(format!("manifest_{direction}.csv")),
        ..Default::default()
    };
    for chunk in pairs.chunks(INFERENCE_CHUNK) {
        let (inputs, targets): (Vec<&Image>, Vec<&Image>) = chunk.iter().map(|p| direction.select(p)).unzip();
        let outputs = synthesize_batch(model, &inputs, direction, InferenceMode::Deterministic)?;
        for ((pair, target), out) in chunk.iter().zip(targets).zip(outputs) {
            let out_path = out_dir.join(format!("{}_{direction}.png", pair.sample_id));
            let err_path = out_dir.join(format!("{}_{direction}_err.png", pair.sample_id));
            let written = target
                .abs_diff(&out)
                .and_then(|err| write_image(&out_path, &out).and_then(|_| write_image(&err_path, &err)));
            if let Err(e) = written {
                log::warn!("sample {}: {e}", pair.sample_id);
                report.failures.push((pair.sample_id.clone(), e));
                continue;
            }
            report.rows.push(SynthesisRow {
                sample_id: pair.sample_id.clone(),
                direction,
                psnr: psnr(&out, target, SIGNED_UNIT_RANGE)?,
                ssim: ssim(&out, target, &params)?,
                out_path,
                err_path,
            });
        }
    }
    write_synthesis_manifest(&report.manifest_path, &report.rows)?;
    Ok(report)
}

pub fn write_synthesis_manifest(path: &Path, rows: &[SynthesisRow]) -> Result<()> {
    let mut text = String::from(SYNTHESIS_MANIFEST_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{:.9},{:.9},{},{}\n",
            r.sample_id,
            r.direction,
            r.psnr,
            r.ssim,
            r.out_path.display(),
            r.err_path.display()
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_synthesis_manifest(path: &Path) -> Result<Vec<SynthesisRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i + 1, format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
        rows.push(SynthesisRow {
            sample_id: f[0].to_string(),
            direction: f[1].parse().map_err(|e: Error| bad(i + 1, e.to_string()))?,
            psnr: num(f[2])?,
            ssim: num(f[3])?,
            out_path: PathBuf::from(f[4]),
            err_path: PathBuf::from(f[5]),
        });
    }
    Ok(rows)
}
