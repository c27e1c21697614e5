use std::path::PathBuf;

use anyhow::Result;
use crtrecruit::estimators::Estimand;
use crtrecruit::sensitivity::{GammaBound, GammaSearch, GammaStar, SensitivityAnalysis, BOUNDED_ESTIMANDS};
use crtrecruit::Error;
use serde::Serialize;

use super::{csv_bytes, fmt_f64, DataArgs, Format, PropensityArgs, PropensityInfo};
use crate::{json, output, UsageError};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub propensity: PropensityArgs,

    /// Sensitivity levels, comma-separated, each at least 1.
    #[arg(long, value_delimiter = ',', default_value = "1,1.25,1.5,2,3")]
    pub gamma: Vec<f64>,

    /// Also search for the smallest level whose bounds include zero.
    #[arg(long)]
    pub find_gamma_star: bool,

    #[arg(long, default_value_t = 10.0)]
    pub gamma_max: f64,

    #[arg(long, default_value_t = 1e-4)]
    pub gamma_tolerance: f64,

    #[arg(long, short)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,

    #[arg(long)]
    pub no_header: bool,
}

#[derive(Serialize)]
struct StarEntry {
    estimand: Estimand,
    result: GammaStar,
}

#[derive(Serialize)]
struct Body {
    input: String,
    propensity: PropensityInfo,
    nu: f64,
    bounds: Vec<GammaBound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<GammaSearch>,
    gamma_star: Vec<StarEntry>,
    warnings: Vec<String>,
}

pub fn run(args: &Args) -> Result<()> {
    if args.gamma.is_empty() || args.gamma.iter().any(|g| !(g.is_finite() && *g >= 1.0)) {
        return Err(UsageError("every --gamma must be a finite value of at least 1".into()).into());
    }
    if args.find_gamma_star && !(args.gamma_max > 1.0 && args.gamma_tolerance > 0.0) {
        return Err(UsageError("--gamma-max must exceed 1 and --gamma-tolerance must be positive".into()).into());
    }
    let dataset = args.data.load()?;
    let prop = args.propensity.resolve(&dataset)?;
    let analysis = SensitivityAnalysis::new(&dataset, &prop.e_values)?.with_nu_guard(args.propensity.nu_guard);
    let bounds = analysis.table(&args.gamma)?;

    let mut warnings = Vec::new();
    if !bounds.iter().any(|b| b.estimand == Estimand::TauC) {
        warnings.push(format!(
            "tau_c bounds unavailable: nu = {:.6} is too close to 1",
            analysis.nu()
        ));
    }
    let search = args.find_gamma_star.then_some(GammaSearch {
        gamma_max: args.gamma_max,
        tolerance: args.gamma_tolerance,
    });
    let mut gamma_star = Vec::new();
    if let Some(search) = &search {
        for estimand in BOUNDED_ESTIMANDS {
            match analysis.minimal_gamma(estimand, search) {
                Ok(result) => gamma_star.push(StarEntry { estimand, result }),
                Err(Error::NoIncentivized { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    let bytes = match args.format {
        Format::Csv => {
            let rows: Vec<Vec<String>> = bounds
                .iter()
                .map(|b| {
                    vec![
                        fmt_f64(b.gamma),
                        b.estimand.label().to_string(),
                        fmt_f64(b.point),
                        fmt_f64(b.lower),
                        fmt_f64(b.upper),
                    ]
                })
                .collect();
            csv_bytes(&["gamma", "estimand", "point", "lower", "upper"], &rows)?
        }
        Format::Json => {
            let body = Body {
                input: args.data.input.display().to_string(),
                propensity: prop.info,
                nu: analysis.nu(),
                bounds,
                search,
                gamma_star,
                warnings,
            };
            json::report("sensitivity", &body, !args.no_header)?
        }
    };
    output::emit(args.output.as_deref(), &bytes)
}
