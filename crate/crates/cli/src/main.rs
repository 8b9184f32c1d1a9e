//! `hybrid-attn` command-line entry point.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use hybrid_attn::ErrorClass;

use commands::Failure;

fn exit_code(failure: &Failure) -> u8 {
    match failure {
        Failure::Usage(_) => 2,
        Failure::Core(e) => match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Format => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 1,
        },
    }
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Core(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&failure))
        }
    }
}
