//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate, latent_symmetry_report, project_pair_latents, write_projection, write_report,
    write_symmetry_report,
};
use crate::objectives::RandomConvFeatures;
use crate::phantoms::{load_pair_dataset, split_by_group, write_phantom_dataset, PhantomSpec, PhasePair};
use crate::synthesis::{synthesize_dataset, Direction};
use crate::trainer::{
    load_checkpoint, load_checkpoint_with, train, AblationMode, RunOptions, TrainState, BEST_CHECKPOINT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_PARTIAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "fdavae",
    version,
    about = "Cross-phase image synthesis with a flip-aligned VAE"
)]
pub struct Cli {
    /// TOML run configuration; built-in desk defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice (data, initialization, noise, splits).
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,

    /// Run directory for training outputs and default checkpoint location.
    #[arg(long, global = true, value_name = "PATH", default_value = "run")]
    pub run_dir: PathBuf,

    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural phantom pairs and a manifest.
    GenerateData(GenerateArgs),
    /// Train a model on a manifest dataset.
    Train(TrainArgs),
    /// Write cross-phase predictions, error maps and a per-sample manifest.
    Synthesize(SynthesizeArgs),
    /// Summarize PSNR, SSIM and perceptual distance per direction.
    Evaluate(EvaluateArgs),
    /// Latent symmetry report and 2D projection of latent means.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Square canvas size in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Standard deviation of additive noise.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f32,
    /// Lower bound of the phase-B enhancement gain.
    #[arg(long, default_value_t = 1.8)]
    pub gain_lo: f32,
    /// Upper bound of the phase-B enhancement gain.
    #[arg(long, default_value_t = 2.2)]
    pub gain_hi: f32,
    /// Number of group labels.
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Backbone,
    KlFda,
    Full,
}

impl From<AblationArg> for AblationMode {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Backbone => AblationMode::BackboneOnly,
            AblationArg::KlFda => AblationMode::KlFda,
            AblationArg::Full => AblationMode::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest (paths inside are relative to its directory).
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Which objectives and decoders to train.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the flip-alignment term.
    #[arg(long)]
    pub lambda_fda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to load; defaults to `<run-dir>/best.bin`.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Which part of the group split to use.
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    AToB,
    BToA,
    Both,
}

impl DirectionArg {
    fn directions(self) -> Vec<Direction> {
        match self {
            DirectionArg::AToB => vec![Direction::AToB],
            DirectionArg::BToA => vec![Direction::BToA],
            DirectionArg::Both => Direction::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "a-to-b")]
    pub direction: DirectionArg,
    /// Output directory; defaults to `<run-dir>/synthesis`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directions to evaluate; defaults to those the checkpoint was trained for.
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Report path; defaults to `<run-dir>/evaluation.csv`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory; defaults to `<run-dir>/diagnostics`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Manifest { .. } | Error::Sample { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Config(_)
        | Error::Shape { .. }
        | Error::EmptyDataset(_)
        | Error::Checkpoint(_)
        | Error::Tensor(_) => EXIT_USAGE,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.train.seed = s;
    }
    Ok(config)
}

fn load_pairs(manifest: &Path, config: &RunConfig) -> Result<Vec<PhasePair>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let (h, w) = config.model.input_size;
    let pre = config.data.preprocess.clone().with_target_size(h, w);
    load_pair_dataset(root, manifest, &pre)
}

fn split(pairs: &[PhasePair], config: &RunConfig, seed: u64) -> Result<(Vec<PhasePair>, Vec<PhasePair>)> {
    let s = split_by_group(pairs, config.data.train_parts, config.data.val_parts, seed)?;
    Ok((s.train, s.validation))
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenerateData(a) => generate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Synthesize(a) => cmd_synthesize(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Diagnose(a) => cmd_diagnose(cli, a),
    }
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<i32> {
    let spec = PhantomSpec {
        canvas_size: a.size,
        enhancement_gain: (a.gain_lo, a.gain_hi),
        noise_sigma: a.noise,
        seed: cli.seed.unwrap_or(0),
        num_groups: a.groups,
        ..Default::default()
    };
    let manifest = write_phantom_dataset(&spec, a.n, &a.out)?;
    log::info!("wrote {} pairs, manifest {}", a.n, manifest.display());
    Ok(EXIT_OK)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let mut config = load_config(cli)?;
    let t = &mut config.train;
    if let Some(m) = a.ablation {
        t.ablation_mode = m.into();
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        t.learning_rate = lr;
    }
    if let Some(l) = a.lambda_fda {
        t.loss_weights.lambda_fda = l;
    }
    config.validate()?;
    let pairs = load_pairs(&a.data.data, &config)?;
    let (train_set, val_set) = split(&pairs, &config, config.train.seed)?;
    fs::create_dir_all(&cli.run_dir).map_err(|e| Error::io(&cli.run_dir, e))?;
    let snapshot = cli.run_dir.join("config.toml");
    fs::write(&snapshot, config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let options = RunOptions {
        run_dir: Some(cli.run_dir.clone()),
        stop_after_epoch: None,
    };
    let out = train(&config.model, &config.train, &train_set, &val_set, &options)?;
    log::info!(
        "trained {} steps over {} epochs; best validation PSNR {:?}",
        out.state.step,
        out.state.epoch,
        out.state.best_val_psnr
    );
    Ok(EXIT_OK)
}

/// Loads the checkpoint and the requested part of the dataset.
fn load_for_inference(cli: &Cli, a: &ModelArgs) -> Result<(TrainState, Vec<PhasePair>, RunConfig)> {
    let path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| cli.run_dir.join(BEST_CHECKPOINT));
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let state = match &cli.config {
        Some(_) => load_checkpoint_with(&path, &load_config(cli)?.model)?,
        None => load_checkpoint(&path)?,
    };
    let mut config = load_config(cli)?;
    config.model = state.model.config().clone();
    let seed = cli.seed.unwrap_or(state.config.seed);
    let pairs = load_pairs(&a.data.data, &config)?;
    let pairs = match a.split {
        SplitArg::All => pairs,
        SplitArg::Train => split(&pairs, &config, seed)?.0,
        SplitArg::Validation => split(&pairs, &config, seed)?.1,
    };
    Ok((state, pairs, config))
}

fn cmd_synthesize(cli: &Cli, a: &SynthesizeArgs) -> Result<i32> {
    let (state, pairs, _) = load_for_inference(cli, &a.model)?;
    let out = a.out.clone().unwrap_or_else(|| cli.run_dir.join("synthesis"));
    let mut failures = 0;
    for d in a.direction.directions() {
        let report = synthesize_dataset(&state.model, &pairs, d, &out)?;
        for (id, e) in &report.failures {
            eprintln!("sample {id}: {e}");
        }
        failures += report.failures.len();
        log::info!(
            "{d}: {} samples -> {}",
            report.rows.len(),
            report.manifest_path.display()
        );
    }
    Ok(if failures > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<i32> {
    let (state, pairs, _) = load_for_inference(cli, &a.model)?;
    let directions = match a.direction {
        Some(d) => d.directions(),
        None => state.config.ablation_mode.directions().to_vec(),
    };
    let report = evaluate(&state.model, &pairs, &directions, &RandomConvFeatures::default())?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cli.run_dir.join("evaluation.csv"));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_report(&out, &report)?;
    for r in &report.rows {
        log::info!(
            "{} {} {:.4} +- {:.4} (n={})",
            r.direction,
            r.metric.as_str(),
            r.mean,
            r.std,
            r.n
        );
    }
    Ok(EXIT_OK)
}

fn cmd_diagnose(cli: &Cli, a: &DiagnoseArgs) -> Result<i32> {
    let (state, pairs, _) = load_for_inference(cli, &a.model)?;
    let out = a.out.clone().unwrap_or_else(|| cli.run_dir.join("diagnostics"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report = latent_symmetry_report(&state.model, &pairs)?;
    write_symmetry_report(&out.join("symmetry.csv"), &report)?;
    let (rows, projection) = project_pair_latents(&state.model, &pairs)?;
    write_projection(&out.join("projection.csv"), &rows, &projection)?;
    log::info!(
        "symmetry: mean |mu_A + mu_B| {:.6}, mean |var_A - var_B| {:.6}",
        report.mean_abs_mu_sum,
        report.mean_abs_var_diff
    );
    Ok(EXIT_OK)
}
