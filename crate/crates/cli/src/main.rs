use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = bioreactor_cli::Cli::parse();
    ExitCode::from(bioreactor_cli::execute(&cli))
}
