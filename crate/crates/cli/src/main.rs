mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::Failure;

#[derive(Parser, Debug)]
#[command(name = "dada", version, about = "Detector-guided adversarial diffusion for false-positive synthesis")]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Root for relative data, checkpoint and output paths.
    #[arg(long, global = true, env = "DADA_OUT_ROOT", default_value = ".")]
    pub out_root: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the toy dataset with its 8:1:1 and two-fold splits.
    GenData(GenData),
    /// Train background denoisers per fold, or a plain DDPM with --plain.
    TrainDenoiser(TrainDenoiser),
    /// Train a toy detector.
    TrainDetector(TrainDetector),
    /// Synthesize one false-positive negative per training image.
    Synthesize(Synthesize),
    /// Precision/recall/F1 on a split, plus FPGR and FID of a synthesis run.
    Evaluate(Evaluate),
    /// FID and FPGR over a grid of attack step sizes.
    SweepAlpha(SweepAlpha),
    /// Retrain the detector with synthesized negatives and compare to baseline.
    Retrain(Retrain),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FoldArg {
    A,
    B,
    All,
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainDenoiser {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub fold: FoldArg,
    /// Ignore box masks and train on the whole training split.
    #[arg(long)]
    pub plain: bool,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint; the iteration count carries over.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainDetector {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `all` trains on the whole training split.
    #[arg(long, value_enum, default_value = "all")]
    pub fold: FoldArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Synthesize {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Denoiser checkpoints; defaults to denoiser_a.json and denoiser_b.json.
    #[arg(long = "denoiser")]
    pub denoisers: Vec<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training images to synthesize from.
    #[arg(long, value_enum, default_value = "all")]
    pub fold: FoldArg,
    /// Explicit regions, one `filename x1 y1 x2 y2` line per image.
    #[arg(long)]
    pub region_file: Option<PathBuf>,
    /// Permit a denoiser that saw the image during training.
    #[arg(long)]
    pub allow_same_fold: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Prf,
    Fpgr,
    Fid,
    All,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// Synthesis output directory, needed for fpgr and fid.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "prf")]
    pub metric: Metric,
    /// Write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepAlpha {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long = "denoiser")]
    pub denoisers: Vec<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.002,0.003,0.004,0.005")]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also retrain the detector per alpha and report test F1.
    #[arg(long)]
    pub retrain: bool,
    /// CSV path; defaults to `<output>/sweep_alpha.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Retrain {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthesis output directory with the negatives.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Baseline detector; trained from scratch with the same seed when absent.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let Some(cmd) = cli.command else {
        if cli.dump_config {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        return Err(Failure::usage("no command given; see --help"));
    };
    commands::apply_flags(&mut cfg, &cmd);
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let paths = cfg.paths.resolved(&cli.out_root);
    commands::dispatch(&cfg, &paths, cmd)
}
