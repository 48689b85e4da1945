//! `poolingvq` command-line tool.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use poolingvq::Error;

use args::{Cli, Command};

/// Maps a library error to the process exit code.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Format(_) | Error::Config(_) | Error::Io(_) | Error::DimMismatch { .. } | Error::ShapeMismatch { .. } => 2,
        Error::TooFewPoints { .. } | Error::EmptySplit | Error::ZeroNorm { .. } | Error::IndexOutOfRange { .. } => 3,
        Error::NonFinite(_) | Error::MissingCache => 4,
    }
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
    let result = match &cli.command {
        Command::InitCodebook(a) => commands::init_codebook(&cli, a),
        Command::Compress(a) => commands::compress(&cli, a),
        Command::TrainToy(a) => commands::train_toy(&cli, a),
        Command::Eval(a) => commands::eval(&cli, a),
        Command::Sweep(a) => commands::sweep(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
