use std::process::ExitCode;

use clap::Parser;
use portrait_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Tolerance(breaches) = &e {
                for b in breaches {
                    eprintln!("  {b}");
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
