//! `unity`: data generation, training, decoding, evaluation, benchmarks and
//! gradient checks from one config file.

mod commands;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "unity", version, about = "Two-pass speech-to-unit translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Sets both task.seed and train.seed; overrides still win.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; every output lands here.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// `section.key=value`, applied after the config file and --seed.
    #[arg(long = "override", global = true, num_args = 1..)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate train/dev/test sets and a text corpus.
    GenData,
    /// Denoising pretraining of the text decoder on the corpus.
    PretrainText,
    /// Train a model on train.tsv.
    Train,
    /// Decode a split with a trained checkpoint.
    Decode,
    /// Score decode.tsv against its references.
    Eval,
    /// Decoding speed and FLOPs over a beam-size sweep.
    Bench,
    /// Capacity or length-ratio sweep.
    Sweep,
    /// Finite-difference gradient suites.
    GradCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainText => "pretrain-text",
            Command::Train => "train",
            Command::Decode => "decode",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Sweep => "sweep",
            Command::GradCheck => "grad-check",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use unity_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Invalid(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = commands::Run {
        command: cli.command,
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        overrides: cli.overrides,
    };
    match commands::run(&run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
