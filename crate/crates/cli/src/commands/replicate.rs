use std::path::PathBuf;

use anyhow::Result;
use crtrecruit::acceptance::{run_acceptance, AcceptanceConfig, CRITERIA};

use crate::{json, output, AcceptanceFailure, UsageError};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Shorter bootstrap-coverage study; that verdict becomes indicative.
    #[arg(long)]
    pub quick: bool,

    /// Criteria to run, comma-separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub criteria: Vec<u8>,

    #[arg(long, default_value_t = AcceptanceConfig::default().seed)]
    pub seed: u64,

    #[arg(long, env = "CRTRECRUIT_THREADS")]
    pub threads: Option<usize>,

    /// Criterion results as JSON.
    #[arg(long, short)]
    pub output: Option<PathBuf>,

    #[arg(long)]
    pub no_header: bool,

    #[arg(long, hide = true)]
    pub corrupt_coefficients: bool,
}

pub fn run(args: &Args) -> Result<()> {
    if let Some(bad) = args.criteria.iter().find(|c| !CRITERIA.contains(c)) {
        return Err(UsageError(format!("unknown criterion {bad}; expected 1 to {}", CRITERIA.len())).into());
    }
    let config = AcceptanceConfig {
        seed: args.seed,
        quick: args.quick,
        criteria: args.criteria.clone(),
        threads: args.threads,
        corrupt_coefficients: args.corrupt_coefficients,
    };
    let results = run_acceptance(&config);
    for r in &results {
        println!("{r}");
    }
    if let Some(path) = &args.output {
        output::write_atomic(path, &json::report("replicate", &results, !args.no_header)?)?;
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AcceptanceFailure(failed).into())
    }
}
