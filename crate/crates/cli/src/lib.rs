//! Command-line front end for the sparse decoding library.

pub mod args;
pub mod commands;
pub mod error;
pub mod needle;
pub mod ppl;

use args::{Cli, Command};
use commands::{to_json, write_output};
pub use error::{CliError, Result};

/// Run one subcommand and write its JSON report.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Decode(a) => write_output(a.out.as_deref(), &to_json(&commands::cmd_decode(a)?)?),
        Command::EvalPpl(a) => write_output(a.out.as_deref(), &to_json(&commands::cmd_eval_ppl(a)?)?),
        Command::Needle(a) => write_output(a.out.as_deref(), &to_json(&commands::cmd_needle(a)?)?),
        Command::Analyze(a) => write_output(None, &to_json(&commands::cmd_analyze(a)?)?),
        Command::Bench(a) => write_output(a.out.as_deref(), &to_json(&commands::cmd_bench(a)?)?),
    }
}
