use std::path::PathBuf;

use anyhow::Result;
use crtrecruit::simulate::{
    generate_stream, run_study, scenario_labels, write_replicates_csv, write_summary_csv, SimScenario, StudyConfig,
};
use crtrecruit::wps::FitSettings;

use super::{check_level, Format};
use crate::{json, output, UsageError};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Scenario label such as `B-1-balanced` or `A-2-unbalanced-violation-J800`.
    #[arg(long, required_unless_present = "list_scenarios")]
    pub scenario: Option<String>,

    /// Print the registered scenario labels and exit.
    #[arg(long)]
    pub list_scenarios: bool,

    /// Override the number of clusters.
    #[arg(long)]
    pub clusters: Option<usize>,

    #[arg(long, default_value_t = 100)]
    pub reps: usize,

    #[arg(long, required_unless_present = "list_scenarios")]
    pub seed: Option<u64>,

    /// Cluster-bootstrap replicates per Monte Carlo replicate; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub boot: usize,

    /// Skip the known-propensity track.
    #[arg(long)]
    pub no_known: bool,

    #[arg(long, default_value_t = 0.95)]
    pub level: f64,

    #[arg(long, default_value_t = crtrecruit::estimators::DEFAULT_NU_GUARD)]
    pub nu_guard: f64,

    #[arg(long, env = "CRTRECRUIT_THREADS")]
    pub threads: Option<usize>,

    /// Summary output; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,

    /// Per-replicate estimates and intervals as CSV.
    #[arg(long, value_name = "PATH")]
    pub replicates_output: Option<PathBuf>,

    /// Full population (potential outcomes and strata) of replicate 0 as CSV.
    #[arg(long, value_name = "PATH")]
    pub dump_population: Option<PathBuf>,

    #[arg(long)]
    pub no_header: bool,
}

pub fn run(args: &Args) -> Result<()> {
    if args.list_scenarios {
        let mut text = scenario_labels().join("\n");
        text.push('\n');
        return output::emit(None, text.as_bytes());
    }
    check_level(args.level)?;
    let label = args.scenario.as_deref().expect("required by clap");
    let seed = args.seed.expect("required by clap");
    let mut scenario = SimScenario::from_label(label)?;
    if let Some(j) = args.clusters {
        scenario = scenario.with_clusters(j);
    }
    if args.reps == 0 {
        return Err(UsageError("--reps must be positive".into()).into());
    }
    let config = StudyConfig {
        n_reps: args.reps,
        seed,
        fit: FitSettings::default(),
        level: args.level,
        nu_guard: args.nu_guard,
        known_sandwich: !args.no_known,
        bootstrap_replicates: args.boot,
        threads: args.threads,
    };

    if let Some(path) = &args.dump_population {
        let pop = generate_stream(&scenario, seed, 0)?;
        let mut buf = Vec::new();
        pop.write_csv(&mut buf)?;
        output::write_atomic(path, &buf)?;
    }

    let study = run_study(&scenario, &config)?;
    if let Some(path) = &args.replicates_output {
        let mut buf = Vec::new();
        write_replicates_csv(&study.replicates, &mut buf)?;
        output::write_atomic(path, &buf)?;
    }
    let bytes = match args.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_summary_csv(&study.summary, &mut buf)?;
            buf
        }
        Format::Json => json::report("simulate", &study.summary, !args.no_header)?,
    };
    output::emit(args.output.as_deref(), &bytes)
}
