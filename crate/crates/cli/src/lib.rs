//! The `mcct` command-line tool: fitting, applying and scoring calibrators,
//! plus repeated-split comparison and sweep experiments.

pub mod args;
pub mod commands;
pub mod error;
pub mod experiments;
pub mod manifest;

use args::{Cli, Command};
pub use error::{CliError, CliResult};

/// How a command finished when it did not fail outright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Outputs were written, but part of the work failed or did not converge.
    Incomplete(String),
}

pub fn run(cli: &Cli) -> CliResult<Status> {
    let g = &cli.global;
    match &cli.command {
        Command::Fit(a) => commands::fit(g, a),
        Command::Apply(a) => commands::apply(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Compare(a) => experiments::compare(g, a),
        Command::SweepSize(a) => experiments::sweep_size(g, a),
        Command::SweepTopk(a) => experiments::sweep_topk(g, a),
        Command::GenSynth(a) => commands::gen_synth(g, a),
    }
}
