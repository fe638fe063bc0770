use std::process::ExitCode;

use clap::Parser;
use mcct_cli::args::Cli;
use mcct_cli::Status;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match mcct_cli::run(&cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Incomplete(msg)) => {
            eprintln!("mcct: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("mcct: {e}");
            ExitCode::FAILURE
        }
    }
}
