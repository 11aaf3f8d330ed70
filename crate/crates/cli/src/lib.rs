//! Command-line front end: toy runs, synthetic experiments, hypervolume of CSV
//! fronts, parameter sweeps and the construction checks.

pub mod args;
pub mod commands;
pub mod error;
pub mod io;
pub mod settings;
pub mod svg;

use std::io::Write;

pub use args::{Cli, Command};
pub use error::CliError;

pub fn run(cli: &Cli, w: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Toy(a) => commands::cmd_toy(a, w),
        Command::Synth(a) => commands::cmd_synth(a, w),
        Command::Hv(a) => commands::cmd_hv(a, w),
        Command::Ablate(a) => commands::cmd_ablate(a, w),
        Command::Checks(a) => commands::cmd_checks(a, w),
    }
}
