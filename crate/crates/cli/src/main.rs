mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::{CliError, CliResult, EXIT_USAGE};

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(cli, a),
        Command::Solve(a) => commands::solve(cli, a),
        Command::Bench(a) => commands::bench(cli, a),
        Command::Verify(a) => commands::verify(cli, a),
        Command::Align(a) => commands::align(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        let e = CliError::Usage(format!("thread pool: {e}"));
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
