//! `vidguard` command-line tool.
//!
//! Exit status is 0 on success, 1 on a domain error (reported as JSON on
//! stderr) and 2 on a usage error.

mod annotate;
mod args;
mod artifact;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn run(cli: &Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match &cli.command {
        Command::Segment(a) => commands::segment(a, seed),
        Command::Guardrail(a) => commands::guardrail_cmd(a, seed),
        Command::Eval(a) => commands::eval(a, seed),
        Command::Flops(a) => commands::flops(a, seed),
        Command::Sweep(a) => commands::sweep_cmd(a, seed),
        Command::CorrelationStudy(a) => commands::correlation(a, seed),
        Command::Annotate(a) => commands::annotate(a, seed),
        Command::Fixture(a) => commands::fixture(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs as usize)
            .build_global()
        {
            eprintln!("{}", CliError::Invalid(format!("thread pool: {e}")).report());
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(1)
        }
    }
}
