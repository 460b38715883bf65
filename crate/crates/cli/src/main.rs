//! `xdistil`: train, distil, evaluate and transfer transformer encoders.
//!
//! Every subcommand reads a TOML run configuration (`--config`) with
//! dotted `--set key=value` overrides, writes `report.jsonl` into the
//! output directory and prints one JSON summary line on stdout.
//!
//! Exit codes: 0 success, 1 contract violation (or a failed gradient
//! check), 2 IO, configuration, parse or data errors and usage errors.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xdistil_core::{Error, Result};

use crate::commands::Outcome;
use crate::config::{RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "xdistil", version, about = "Progressive distillation of transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set student.model.num_layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Floating-point precision for model code.
    #[arg(long, value_enum, default_value_t = Precision::F32, global = true)]
    precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model with cross-entropy on the labeled data.
    Finetune,
    /// Run the staged teacher-to-student recipe.
    Distil,
    /// Pick the source task with the best mean transfer score.
    SelectTask,
    /// Grow a transfer set from nearest-neighbour sentence pairs.
    Augment,
    /// Give a student a new vocabulary from another embedding table.
    SwapEmbeddings,
    /// Score a checkpoint on the test data.
    Eval,
    /// Run the registered finite-difference gradient suites.
    Gradcheck,
}

fn run(cli: &Cli) -> Result<Outcome> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, env_seed.as_deref())?;
    let f64 = cli.precision == Precision::F64;
    match cli.command {
        Command::Finetune if f64 => commands::finetune::<f64>(&cfg),
        Command::Finetune => commands::finetune::<f32>(&cfg),
        Command::Distil if f64 => commands::distil_cmd::<f64>(&cfg),
        Command::Distil => commands::distil_cmd::<f32>(&cfg),
        Command::SelectTask => commands::select_task(&cfg),
        Command::Augment => commands::augment(&cfg),
        Command::SwapEmbeddings if f64 => commands::swap::<f64>(&cfg),
        Command::SwapEmbeddings => commands::swap::<f32>(&cfg),
        Command::Eval if f64 => commands::eval::<f64>(&cfg),
        Command::Eval => commands::eval::<f32>(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io_or_config() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{}", out.summary);
            ExitCode::from(if out.ok { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
