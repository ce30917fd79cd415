use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    armstack::cli::main_with(armstack::cli::Cli::parse())
}
