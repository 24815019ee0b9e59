//! `selseg`: segment, train, generate fixtures and score results from the
//! command line.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 3 when a solver or
//! network produces non-finite values.

mod commands;
mod fsio;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selseg_core::synth::FixtureKind;
use selseg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "selseg", version, about = "Marker-driven selective image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment one image from its marker polygon.
    Segment(SegmentArgs),
    /// Train a VM net (m1 to m4) on a directory of image/marker pairs.
    Train(TrainArgs),
    /// Write synthetic fixtures with ground truth and markers.
    Synth(SynthArgs),
    /// Score predicted masks against ground truth (DICE and Jaccard).
    Eval(EvalArgs),
}

#[derive(clap::Args, Debug)]
pub struct SegmentArgs {
    /// Input image (binary PGM or grayscale PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Marker polygon as JSON `[[row, col], ...]`.
    #[arg(long)]
    pub markers: PathBuf,
    /// One of tv, elastica, dip, m1, m2, m3, m4.
    #[arg(long)]
    pub method: String,
    /// Checkpoint written by `selseg train`; required for m1 to m4.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ground-truth mask; when given, a metrics CSV is written.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Overrides the config seed (network initialisation and noise).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for masks/, u/ and CSV files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// One of m1, m2, m3, m4.
    #[arg(long)]
    pub method: String,
    /// Directory of images with same-stem marker JSON files.
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; the loss trace goes next to it as `<name>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    /// One of disc, disc-notch, two-object.
    #[arg(long)]
    pub kind: FixtureKind,
    /// Image side in pixels; a multiple of 8, at least 16.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Seed of the first fixture.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of fixtures, with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Output directory; ground truth goes to its gt/ subdirectory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Value of the method column in the report.
    #[arg(long, default_value = "pred")]
    pub label: String,
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const USAGE: u8 = 2;
    pub const NUMERICAL: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: message.into() }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::usage(format!("{}: {err}", path.display()))
    }

    /// Prefixes the path unless the message already names it.
    pub fn context(mut self, path: &Path) -> Self {
        let shown = path.display().to_string();
        if !self.message.contains(&shown) {
            self.message = format!("{shown}: {}", self.message);
        }
        self
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => Self::NUMERICAL,
            _ => Self::USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Segment(a) => commands::segment(&a),
        Command::Train(a) => commands::train(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
