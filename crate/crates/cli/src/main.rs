//! `troll`: command-line front end for the trust-region projection kernel.
//!
//! Exit codes: 0 success, 1 invalid arguments or input, 2 runtime failure.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, BoundArgs, CheckGradArgs, ProjectArgs, SparsifyArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "troll", version, about = "Differentiable KL trust-region projection toolkit")]
struct Cli {
    /// Worker threads for batch parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project JSONL {target, reference} pairs onto the KL ball.
    Project(ProjectArgs),
    /// Compare the projection VJP against finite differences.
    CheckGrad(CheckGradArgs),
    /// Sparsify JSONL dense distributions.
    Sparsify(SparsifyArgs),
    /// Time forward and backward passes on random instances.
    Bench(BenchArgs),
    /// Run toy verifiable-reward training.
    Train(TrainArgs),
    /// Evaluate the sparsification KL bound for given constants.
    Bound(BoundArgs),
}

/// Failure class that decides the exit code.
#[derive(Debug)]
pub enum CliError {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<troll_core::Error> for CliError {
    fn from(e: troll_core::Error) -> Self {
        if e.is_validation() {
            CliError::Invalid(e.into())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Invalid(anyhow::anyhow!("{msg}"))
}

pub fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(anyhow::anyhow!("{msg}"))
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(invalid("--threads must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(runtime)?;
    pool.install(|| match cli.command {
        Command::Project(a) => commands::project(a),
        Command::CheckGrad(a) => commands::check_grad(a),
        Command::Sparsify(a) => commands::sparsify(a),
        Command::Bench(a) => commands::bench(a),
        Command::Train(a) => commands::train(a),
        Command::Bound(a) => commands::bound(a),
    })
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Invalid(err) | CliError::Runtime(err)) = &e;
            eprintln!("error: {err:#}");
            ExitCode::from(e.code())
        }
    }
}
