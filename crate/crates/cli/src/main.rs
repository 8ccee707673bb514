mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "diac", version, about = "Speech-assisted Arabic diacritization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tone-coded corpus (train.jsonl, dev.jsonl, wav/).
    Synth(SynthArgs),
    /// Train one checkpoint.
    Train(TrainArgs),
    /// Diacritize a manifest with an MC-dropout ensemble.
    Infer(InferArgs),
    /// Score predictions against gold.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthPreset {
    Default,
    Desk,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Training samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Dev samples.
    #[arg(long, default_value_t = 32)]
    dev_n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SynthPreset::Default)]
    preset: SynthPreset,
    /// Std of the additive Gaussian noise.
    #[arg(long)]
    noise_floor: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest (overrides [paths] manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory (overrides [paths] out).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training preset: table1-primary, alt-checkpoint4 or desk-synth.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    /// Passes per model; a list runs one sweep setting per value.
    #[arg(long, value_delimiter = ',')]
    passes: Vec<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run config whose [model] section the checkpoints must match.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    Include,
    Exclude,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value_t = Toggle::Include)]
    case_endings: Toggle,
    #[arg(long, value_enum, default_value_t = Toggle::Include)]
    no_diacritic: Toggle,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
