//! Command-line front end for the semi-dense stereo pipeline.
//!
//! Exit codes: 0 success, 1 I/O or file-format failure, 2 configuration
//! error, 3 numerical failure.

mod commands;
mod errors;
mod overlay;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sdstereo",
    version,
    about = "Semi-dense active stereo: ZNCC matching and Bayesian subpixel refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic active-stereo dataset
    GenData(commands::gen_data::GenDataArgs),
    /// Compute a raw disparity map and optional cost volume
    Match(commands::match_cmd::MatchArgs),
    /// Train the refinement network
    Train(commands::train_cmd::TrainArgs),
    /// Refine a stereo pair with a trained checkpoint
    Infer(commands::infer_cmd::InferArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(commands::eval_cmd::EvalArgs),
    /// Sparsification curve from prediction, ground truth, and score files
    Sparsify(commands::sparsify_cmd::SparsifyArgs),
    /// Verify the outlier down-weighting guarantee
    TheoryCheck(commands::theory_cmd::TheoryArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Match(args) => commands::match_cmd::run(args),
        Command::Train(args) => commands::train_cmd::run(args),
        Command::Infer(args) => commands::infer_cmd::run(args),
        Command::Eval(args) => commands::eval_cmd::run(args),
        Command::Sparsify(args) => commands::sparsify_cmd::run(args),
        Command::TheoryCheck(args) => commands::theory_cmd::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
