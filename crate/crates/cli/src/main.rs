mod commands;
mod config;
mod json;
mod output;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{estimate, replicate, sensitivity, simulate};

#[derive(Parser)]
#[command(
    name = "crtrecruit",
    version,
    about = "Weighting estimators for cluster randomized trials with post-randomization recruitment"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Read default flags from a `key = value` file; command-line flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<std::path::PathBuf>,

    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the working propensity model and estimate all causal effects.
    Estimate(estimate::Args),
    /// Bound the stratum estimands under propensity misspecification.
    Sensitivity(sensitivity::Args),
    /// Run a Monte Carlo study on a registered scenario.
    Simulate(simulate::Args),
    /// Run the acceptance criteria.
    Replicate(replicate::Args),
}

const SUBCOMMANDS: [&str; 4] = ["estimate", "sensitivity", "simulate", "replicate"];

/// Bad invocation that clap cannot catch on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Returned by `replicate` when a criterion fails.
#[derive(Debug)]
pub struct AcceptanceFailure(pub Vec<u8>);

impl fmt::Display for AcceptanceFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "acceptance criteria failed: {:?}", self.0)
    }
}

impl std::error::Error for AcceptanceFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use crtrecruit::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<AcceptanceFailure>().is_some() {
        return 6;
    }
    match err.downcast_ref::<E>() {
        Some(E::InvalidInput(_)) => 2,
        Some(E::Io(_) | E::Parse { .. } | E::Consistency(_) | E::Dimension { .. }) => 3,
        Some(E::Convergence { .. } | E::Separation(_)) => 4,
        Some(
            E::Design(_)
            | E::DegenerateArm(_)
            | E::NoIncentivized { .. }
            | E::NumericalDegeneracy(_)
            | E::BootstrapUnreliable { .. }
            | E::Generation(_),
        ) => 5,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Estimate(a) => estimate::run(a),
        Command::Sensitivity(a) => sensitivity::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Replicate(a) => replicate::run(a),
    }
}

fn fail(err: &anyhow::Error) -> ExitCode {
    eprintln!("error: {err:#}");
    ExitCode::from(exit_code(err))
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect(), &SUBCOMMANDS) {
        Ok(args) => args,
        Err(err) => return fail(&err),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .parse_env("CRTRECRUIT_LOG")
        .init();
    if let Some(path) = &cli.config {
        log::debug!("defaults read from {}", path.display());
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => fail(&err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_classes() {
        let code = |e: crtrecruit::Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(crtrecruit::Error::InvalidInput("x".into())), 2);
        assert_eq!(code(crtrecruit::Error::Consistency("x".into())), 3);
        assert_eq!(code(crtrecruit::Error::Separation("x".into())), 4);
        assert_eq!(code(crtrecruit::Error::DegenerateArm("x".into())), 5);
        assert_eq!(code(crtrecruit::Error::BootstrapUnreliable { failed: 1, total: 2 }), 5);
        assert_eq!(exit_code(&UsageError("x".into()).into()), 2);
        assert_eq!(exit_code(&AcceptanceFailure(vec![1]).into()), 6);
        let wrapped = anyhow::Error::from(crtrecruit::Error::Separation("x".into())).context("fitting");
        assert_eq!(exit_code(&wrapped), 4);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
