mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "slimkws", version, about = "Train, evaluate, export and profile slimmable keyword spotters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a super-network on every configured width.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one or all widths.
    Eval(EvalArgs),
    /// Write the sub-network of one width as a standalone checkpoint.
    Export(ExportArgs),
    /// Measure seconds per training step against the number of widths.
    Profile(ProfileArgs),
    /// Write a synthetic keyword dataset as WAV files.
    SynthData(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    /// Run configuration (INI)
    pub config: PathBuf,
    #[arg(long)]
    /// Continue from a training checkpoint
    pub resume: Option<PathBuf>,
    #[arg(long)]
    /// Overrides [train] seed
    pub seed: Option<u64>,
    #[arg(long)]
    /// Stop after this many total steps
    pub max_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    /// Run configuration providing the data and feature settings
    pub config: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "all")]
    /// A width from the checkpoint's list, or `all`
    pub width: String,
    #[arg(long)]
    /// Write the report as JSON here, plus a .txt table beside it
    pub report: Option<PathBuf>,
    #[arg(long)]
    /// Count every width's norm parameters, as stored in the super-network
    pub all_norm_sets: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub width: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    /// Width counts to profile, overriding [profile] width_counts
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    /// Write the timing table as JSON here
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Export(a) => commands::export(a),
        Command::Profile(a) => commands::profile(a),
        Command::SynthData(a) => commands::synth_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
