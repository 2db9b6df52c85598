//! Command-line driver: synthesize or ingest data, train, evaluate and
//! sample noise models.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "srgbflow", version, about = "Conditional normalizing flows for sRGB camera noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render a synthetic dataset and its generator sidecar
    SynthData,
    /// Cut paired PNG images into a dataset
    Ingest,
    /// Train a model and write checkpoints and logs
    Train,
    /// Score models on the validation split
    Eval,
    /// Draw noise for validation patches
    Sample,
    /// Variance-versus-intensity curves of data and models
    Curves,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sample => "sample",
            Command::Curves => "curves",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(cli.command.name(), &cli.overrides)?;
    match cli.command {
        Command::SynthData => commands::synth_data(&cfg),
        Command::Ingest => commands::ingest(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Sample => commands::sample(&cfg),
        Command::Curves => commands::curves(&cfg),
    }
}

/// 2 for configuration errors, 3 for data and IO errors, 4 for numeric
/// failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<srgbflow::Error>() {
            return match err {
                _ if err.is_numeric() => 4,
                srgbflow::Error::Config(_) => 2,
                srgbflow::Error::Data(_) | srgbflow::Error::Io(_) | srgbflow::Error::Json(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
