use std::path::PathBuf;

use anyhow::Result;
use crtrecruit::data::{summarize, Diagnostics};
use crtrecruit::estimators::{
    estimate_from_propensities, strata_covariate_profile, Estimand, EstimateConfig, EstimateReport, StrataProfile,
};
use crtrecruit::inference::{interval_method, BootstrapConfig, InferenceContext, INTERVAL_METHODS};
use crtrecruit::Error;
use serde::Serialize;

use super::{check_level, csv_bytes, fmt_f64, DataArgs, Format, PropensityArgs, PropensityInfo};
use crate::{json, output, UsageError};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub propensity: PropensityArgs,

    /// Interval methods, comma-separated: sandwich, bootstrap, none.
    #[arg(long, value_delimiter = ',', default_value = "sandwich")]
    pub variance: Vec<String>,

    /// Cluster-bootstrap replicates.
    #[arg(long, default_value_t = 300)]
    pub boot: usize,

    /// Bootstrap seed; required with `--variance bootstrap`.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value_t = 0.95)]
    pub level: f64,

    /// Worker threads for the bootstrap.
    #[arg(long, env = "CRTRECRUIT_THREADS")]
    pub threads: Option<usize>,

    /// Output file; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,

    /// Omit the run-metadata header so output is byte-reproducible.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Serialize)]
struct Body {
    input: String,
    propensity: PropensityInfo,
    estimates: EstimateReport,
    diagnostics: Diagnostics,
    strata_profile: Option<StrataProfile>,
}

fn methods(args: &Args) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for m in &args.variance {
        match m.as_str() {
            "none" => {}
            m if INTERVAL_METHODS.contains(&m) => {
                if !out.iter().any(|x| x == m) {
                    out.push(m.to_string());
                }
            }
            other => {
                return Err(UsageError(format!(
                    "unknown variance method {other:?}; expected {} or none",
                    INTERVAL_METHODS.join(", ")
                ))
                .into())
            }
        }
    }
    if out.iter().any(|m| m == "bootstrap") {
        if args.seed.is_none() {
            return Err(UsageError("--variance bootstrap requires --seed".into()).into());
        }
        if args.boot == 0 {
            return Err(UsageError("--boot must be positive".into()).into());
        }
    }
    Ok(out)
}

fn to_csv(report: &EstimateReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for estimand in [
        Estimand::TauR,
        Estimand::TauA,
        Estimand::TauAc,
        Estimand::TauC,
        Estimand::Nu,
    ] {
        let Some(point) = report.point(estimand) else { continue };
        let intervals: Vec<_> = report.intervals.iter().filter(|iv| iv.estimand == estimand).collect();
        if intervals.is_empty() {
            let mut row = vec![estimand.label().to_string(), fmt_f64(point)];
            row.extend(std::iter::repeat_n(String::new(), 5));
            rows.push(row);
        }
        for iv in intervals {
            rows.push(vec![
                estimand.label().to_string(),
                fmt_f64(point),
                iv.method.clone(),
                fmt_f64(iv.se),
                fmt_f64(iv.lower),
                fmt_f64(iv.upper),
                fmt_f64(iv.level),
            ]);
        }
    }
    rows.push(vec![
        "naive".into(),
        fmt_f64(report.naive_difference),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ]);
    csv_bytes(&["estimand", "point", "method", "se", "lower", "upper", "level"], &rows)
}

pub fn run(args: &Args) -> Result<()> {
    check_level(args.level)?;
    let methods = methods(args)?;
    let dataset = args.data.load()?;
    let prop = args.propensity.resolve(&dataset)?;
    let nu_guard = args.propensity.nu_guard;
    let mut report = estimate_from_propensities(&dataset, &prop.e_values, &EstimateConfig { nu_guard })?;

    let bootstrap = BootstrapConfig {
        replicates: args.boot,
        seed: args.seed.unwrap_or(0),
        level: args.level,
        threads: args.threads,
        ..BootstrapConfig::default()
    };
    let mut intervals = Vec::new();
    for name in &methods {
        let method = interval_method(name, &bootstrap).expect("validated method name");
        let ctx = InferenceContext {
            dataset: &dataset,
            e_values: &prop.e_values,
            report: &report,
            propensity: prop.source.clone(),
            level: args.level,
            nu_guard,
        };
        intervals.extend(method.intervals(&ctx)?);
    }
    report.intervals = intervals;

    let strata_profile = match strata_covariate_profile(&dataset, &prop.e_values, report.nu, nu_guard) {
        Ok(p) => Some(p),
        Err(Error::NoIncentivized { .. }) => None,
        Err(e) => return Err(e.into()),
    };

    let bytes = match args.format {
        Format::Csv => to_csv(&report)?,
        Format::Json => {
            let body = Body {
                input: args.data.input.display().to_string(),
                propensity: prop.info,
                estimates: report,
                diagnostics: summarize(&dataset),
                strata_profile,
            };
            json::report("estimate", &body, !args.no_header)?
        }
    };
    output::emit(args.output.as_deref(), &bytes)
}
