//! `hgsignal`: generate scenarios, train, evaluate, compare controllers and
//! run the gradient/invariant self-check.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn version() -> &'static str {
    let parallel = if hgsignal::par::Exec::Parallel.is_parallel() { "on" } else { "off" };
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    let text = format!("{} (parallel {parallel}, {profile} build, {})", env!("CARGO_PKG_VERSION"), std::env::consts::ARCH);
    Box::leak(text.into_boxed_str())
}

fn main() -> ExitCode {
    let matches = match commands::Cli::command().version(version()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match commands::Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
