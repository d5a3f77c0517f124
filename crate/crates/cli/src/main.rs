//! `tiertune`: collect, fit, pretrain, tune and sweep.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Process exit status classes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Artifact(anyhow::Error),
    Environment(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Artifact(_) => 2,
            Failure::Environment(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Artifact(e) | Failure::Environment(e) => e,
        }
    }
}

pub fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

pub fn artifact(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Artifact(e.into())
}

pub fn environment(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Environment(e.into())
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = commands::catalog(cli.catalog.as_deref()).and_then(|catalog| match cli.command {
        Command::Collect(a) => commands::collect(&catalog, a),
        Command::Fit(a) => commands::fit(&catalog, a),
        Command::Pretrain(a) => commands::pretrain(&catalog, a),
        Command::Tune(a) => commands::tune(&catalog, a),
        Command::Sweep(a) => commands::sweep(&catalog, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
