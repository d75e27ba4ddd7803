//! `lcslab` — batch experiment runner for object-based land-cover
//! classification on synthetic landscapes.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 file I/O or format,
//! 3 data validation, 4 training failure.

mod args;
mod commands;
mod pipeline;
mod plot;
mod settings;
mod sweep;

use clap::Parser;
use lcslab::Error;

use args::{Cli, Command};

fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Format(_) => 2,
        Error::Validation(_) => 3,
        Error::Training(_) => 4,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout and succeed; real usage errors
            // exit 1 to match the documented code table.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::run_synth(a),
        Command::Segment(a) => commands::run_segment(a),
        Command::Graph(a) => commands::run_graph(a),
        Command::Train(a) => commands::run_train(a),
        Command::Predict(a) => commands::run_predict(a),
        Command::Eval(a) => commands::run_eval(a),
        Command::Sweep(a) => sweep::run_sweep(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
