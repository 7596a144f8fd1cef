use clap::Args;
use sdstereo_core::eval::{self, TheoryInstance};

use crate::errors::{CliError, CliResult};

/// Check the down-weighting guarantee on the worked example and a random
/// sweep; exits nonzero if any instance violates it.
#[derive(Args, Debug)]
pub struct TheoryArgs {
    /// Number of random instances
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Sweep seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: TheoryArgs) -> CliResult<()> {
    let worked = TheoryInstance {
        targets: vec![0.0, 0.0],
        candidates: vec![vec![0.0, 1.0], vec![0.4, 0.4]],
        outlier: vec![false, true],
        alpha: 0.1,
    };
    let v = eval::theory_check(&worked);
    if !v.holds {
        return Err(CliError::Numeric(
            "worked example violates the guarantee".into(),
        ));
    }
    let violations = eval::theory_sweep(args.n, args.seed);
    println!(
        "worked example holds; {} of {} random instances violated the guarantee",
        violations, args.n
    );
    if violations > 0 {
        return Err(CliError::Numeric(format!(
            "{violations} instances violated the down-weighting guarantee"
        )));
    }
    Ok(())
}
