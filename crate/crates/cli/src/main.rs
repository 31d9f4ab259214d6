//! `lowshot`: generate, simulate, split, train, imprint, refine, evaluate
//! and analyze from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or stage order, 2 runtime failure.

mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Context_, EvalArgs, GenerateArgs, ImprintArgs, RefineArgs, SimulateArgs, SplitArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "lowshot", version, about = "Low-shot detection refinement pipeline")]
struct Cli {
    /// TOML file with training settings; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run on one thread (bitwise reproducible)
    #[arg(long, global = true)]
    single_thread: bool,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset
    Generate(GenerateArgs),
    /// Simulate base-detector output on a dataset
    Simulate(SimulateArgs),
    /// Select k shots per novel class
    Split(SplitArgs),
    /// Train the correction network (phase 1, or phase 2 after imprint)
    Train(TrainArgs),
    /// Imprint novel rows and re-infer the background row
    Imprint(ImprintArgs),
    /// Fuse correction-network probabilities into detection scores
    Refine(RefineArgs),
    /// Average precision, IoU histogram and oracle curve
    Evaluate(EvalArgs),
    /// Write the IoU histogram and oracle curve as tables and plots
    Analyze(EvalArgs),
}

/// Bad input from the user, reported with exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some()
            || c.downcast_ref::<lowshot_core::Error>().is_some_and(lowshot_core::Error::is_validation)
    });
    if validation {
        1
    } else {
        2
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Context_ { config_file: cli.config.clone(), single_thread: cli.single_thread };
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Imprint(a) => commands::imprint(&ctx, a),
        Command::Refine(a) => commands::refine(&ctx, a),
        Command::Evaluate(a) => commands::evaluate_cmd(&ctx, a),
        Command::Analyze(a) => commands::analyze(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
