//! `range-score`: command-line front end for projection, synthetic data,
//! training, sampling, densification and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Preset;

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "RANGE_SCORE_OUTPUT_ROOT";

pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "range-score",
    version,
    about = "Score-based generative modeling of LiDAR range images"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Sensor preset.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,

    /// Bitwise-reproducible outputs (wall-clock columns are zeroed).
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw sweeps (.bin files or directories of them) to range images.
    Project(ProjectArgs),
    /// Generate a synthetic dataset of range images.
    Synth(SynthArgs),
    /// Train a score network on a directory of range images.
    Train(TrainArgs),
    /// Draw unconditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Densify sweeps by keeping every n-th beam and sampling the rest.
    Densify(DensifyArgs),
    /// Compare two sets of range images and write a metric report.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Input files or directories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Raw record layout.
    #[arg(long, value_enum, default_value = "kitti")]
    pub format: SweepFormatArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SweepFormatArg {
    Kitti,
    Nuscenes,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of sweeps.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write each sweep as a KITTI-layout .bin point cloud.
    #[arg(long)]
    pub bin: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of range-image containers.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Images per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Write a checkpoint every n steps (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Divide every channel count of the default plan by this factor.
    #[arg(long)]
    pub channel_divisor: Option<usize>,
    /// Number of noise levels L.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Largest noise level.
    #[arg(long)]
    pub sigma_first: Option<f64>,
    /// Smallest noise level.
    #[arg(long)]
    pub sigma_last: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplerFlags {
    /// Langevin step size.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Langevin iterations per noise level.
    #[arg(long)]
    pub steps_per_level: Option<usize>,
    /// `as-printed` or `ncsn-standard`.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of samples.
    #[arg(long, short = 'n', default_value_t = 4)]
    pub count: usize,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also export each sample as an ASCII PLY point cloud.
    #[arg(long)]
    pub ply: bool,
    #[command(flatten)]
    pub sampler: SamplerFlags,
}

#[derive(Debug, Args)]
pub struct DensifyArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Full-resolution range-image containers (files or directories).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Keep every `stride`-th beam.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Guidance weight toward the observed beams.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Scale the guidance weight by sigma_L^2 / sigma_i^2 at each level.
    #[arg(long)]
    pub per_level_scaling: bool,
    /// Also export each densified sweep as an ASCII PLY point cloud.
    #[arg(long)]
    pub ply: bool,
    #[command(flatten)]
    pub sampler: SamplerFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of reference range images.
    #[arg(long)]
    pub reference: PathBuf,
    /// Directory of candidate range images.
    #[arg(long)]
    pub candidate: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Checkpoint whose bottleneck features drive FRD.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use raw pixels as FRD features when no checkpoint is given.
    #[arg(long)]
    pub pixel_frd: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::classify(&err))
        }
    }
}
