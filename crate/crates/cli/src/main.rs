//! `avasd`: synthetic data generation, feature extraction, training,
//! evaluation, latency benchmarking and the layer-depth ablation grid.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Preset;

/// Invalid flags, config files or option values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "avasd", version, about = "Audiovisual active speaker detection")]
pub struct Cli {
    /// TOML file with [synth], [mfcc], [train], [model] and [bench] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic audiovisual corpus.
    GenSynth(GenSynthArgs),
    /// Compute MFCCs of a WAV file into a tensor blob.
    ExtractMfcc(ExtractMfccArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Measure single-threaded inference latency.
    Bench(BenchArgs),
    /// Train and evaluate every variant with 1 and 2 BiGRU layers.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Confuser fraction in [0, 1].
    #[arg(long)]
    pub confusers: Option<f64>,
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExtractMfccArgs {
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_mels: Option<usize>,
    #[arg(long)]
    pub n_fft: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<avasd::model::Variant>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub bigru_layers: Option<u8>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Sequences per batch (even).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Add RMS-level Gaussian noise to every waveform before MFCC.
    #[arg(long)]
    pub noise: bool,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Report path; defaults to the checkpoint path with `.eval.toml`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Include MFCC extraction in the timed region.
    #[arg(long)]
    pub with_dsp: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

fn parse_variant(s: &str) -> Result<avasd::model::Variant, String> {
    s.parse().map_err(|e: avasd::Error| e.to_string())
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Maps an error chain to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<avasd::Error>() {
            return match e {
                avasd::Error::NonFiniteLoss { .. } | avasd::Error::NonFiniteGradient(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
