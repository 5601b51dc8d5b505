use std::process::ExitCode;

use clap::Parser;
use gga_lab::{execute, exit_code, Cli};

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gga-lab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
