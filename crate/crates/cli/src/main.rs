use std::process::ExitCode;

use clap::Parser;
use sparsedec_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match sparsedec_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sparsedec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
