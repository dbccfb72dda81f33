//! `openset`: fit class-conditional mixtures to detector logits and use them
//! to flag open-set errors.
//!
//! Parameters come from, in order of precedence, command-line flags, the
//! JSON file given with `--config`, and the built-in defaults.

mod error;
mod eval;
mod fit;
mod io;
mod report;
mod score;
mod split;
mod toy;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "openset", version, about = "Open-set error detection for object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a closed-set annotation file into an open-set benchmark.
    SplitDataset(split::Args),
    /// Fit one mixture per known class and pick the component count.
    Fit(fit::Args),
    /// Score detections with fitted mixtures.
    Score(score::Args),
    /// Categorise scored detections and compute AUROC, TPR@OSR and mAP.
    Eval(eval::Args),
    /// Train the synthetic toy head and export its logits.
    TrainToy(toy::Args),
    /// Render an evaluation report as Markdown.
    Report(report::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SplitDataset(a) => split::run(a),
        Command::Fit(a) => fit::run(a),
        Command::Score(a) => score::run(a),
        Command::Eval(a) => eval::run(a),
        Command::TrainToy(a) => toy::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
