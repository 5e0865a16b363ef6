mod args;
mod commands;
mod draw;

use std::process::ExitCode;

use clap::Parser;
use yoffle_core::ErrorKind;

use crate::args::Cli;

/// Exit statuses. Usage errors from argument parsing also map to `CONFIG`.
pub mod exit {
    pub const OK: u8 = 0;
    pub const GENERAL: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const FORMAT: u8 = 3;
    pub const DATA: u8 = 4;
    pub const IO: u8 = 5;
}

/// Front-end failures not raised by the core library.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<yoffle_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => exit::CONFIG,
                ErrorKind::Format => exit::FORMAT,
                ErrorKind::Data => exit::DATA,
                ErrorKind::Io => exit::IO,
            };
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => exit::CONFIG,
                CliError::Data(_) => exit::DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::GENERAL
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("YOFFLE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
