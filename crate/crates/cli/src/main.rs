mod args;
mod commands;
mod config;
mod plots;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::UsageError;

/// Environment variable that pins every kernel to one thread.
const DETERMINISTIC_ENV: &str = "VSYNTH_DETERMINISTIC";

fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if deterministic_requested() && !vessel_synth::par::use_single_thread() {
        eprintln!("error: could not restrict the thread pool for {DETERMINISTIC_ENV}");
        return ExitCode::FAILURE;
    }
    let result = match &cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Infer(a) => commands::infer(a),
        Command::AblateDilation(a) => commands::ablate_dilation(a),
        Command::Report(a) => commands::report(a),
        Command::GridSearch(a) => commands::grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
