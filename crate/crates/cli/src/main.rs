use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod files;
mod manifest;

use args::{Cli, Command};
use commands::UsageError;

const EXIT_ERROR: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { spec, seed, out } => commands::generate(spec.as_deref(), seed, &out),
        Command::Train { data, train, out } => commands::train(&data, &train, &out),
        Command::Sweep {
            data,
            axis,
            values,
            train,
            out,
        } => commands::sweep(&data, axis, &values, &train, &out),
        Command::Eval {
            checkpoint,
            data,
            stratum,
            ks,
            out,
        } => commands::eval(&checkpoint, &data, stratum.into(), &ks, out.as_deref()),
        Command::Replay { manifest, out } => commands::replay(&manifest, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return EXIT_USAGE;
    }
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<multigrain::Error>())
        .any(|e| matches!(e, multigrain::Error::NumericFailure(_)));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_ERROR
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
