pub mod estimate;
pub mod replicate;
pub mod sensitivity;
pub mod simulate;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use crtrecruit::data::{load_csv, CsvSchema, RecruitedDataset};
use crtrecruit::inference::PropensitySource;
use crtrecruit::optim::MINIMIZERS;
use crtrecruit::wps::{fit, FitInit, FitResult, FitSettings, WpsModel};
use serde::Serialize;

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Recruited-sample CSV and its column layout.
#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Recruited-sample CSV, one row per recruited individual.
    #[arg(long, short)]
    pub input: PathBuf,

    #[arg(long, default_value = "cluster")]
    pub cluster_col: String,

    /// 0/1 cluster treatment column.
    #[arg(long, default_value = "treatment")]
    pub treatment_col: String,

    #[arg(long, default_value = "outcome")]
    pub outcome_col: String,

    /// Comma-separated covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,

    /// Design probability that a cluster is assigned to treatment.
    #[arg(long)]
    pub pi_t: f64,
}

impl DataArgs {
    pub fn load(&self) -> Result<RecruitedDataset> {
        let schema = CsvSchema {
            cluster: self.cluster_col.clone(),
            treatment: self.treatment_col.clone(),
            outcome: self.outcome_col.clone(),
            covariates: self.covariates.clone(),
        };
        load_csv(&self.input, &schema, self.pi_t).with_context(|| format!("loading {}", self.input.display()))
    }
}

/// How the working propensity scores are obtained.
#[derive(Debug, clap::Args)]
pub struct PropensityArgs {
    /// Skip fitting and use alpha = 0 (or `--e-const`).
    #[arg(long)]
    pub no_fit: bool,

    /// Use this propensity for every individual; implies `--no-fit`.
    #[arg(long, value_name = "E")]
    pub e_const: Option<f64>,

    #[arg(long, default_value = "bfgs")]
    pub optimizer: String,

    #[arg(long, default_value_t = 500)]
    pub max_iterations: usize,

    /// Estimates of tau_c are withheld when nu is within this of 1.
    #[arg(long, default_value_t = crtrecruit::estimators::DEFAULT_NU_GUARD)]
    pub nu_guard: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityInfo {
    pub source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
}

pub struct Propensities {
    pub e_values: Vec<f64>,
    pub info: PropensityInfo,
    pub source: PropensitySource,
}

impl PropensityArgs {
    pub fn settings(&self) -> Result<FitSettings> {
        if !MINIMIZERS.contains(&self.optimizer.as_str()) {
            return Err(UsageError(format!(
                "unknown optimizer {:?}; expected one of {}",
                self.optimizer,
                MINIMIZERS.join(", ")
            ))
            .into());
        }
        let mut settings = FitSettings {
            optimizer: self.optimizer.clone(),
            ..FitSettings::default()
        };
        settings.optim.max_iterations = self.max_iterations;
        Ok(settings)
    }

    pub fn resolve(&self, dataset: &RecruitedDataset) -> Result<Propensities> {
        let settings = self.settings()?;
        if let Some(c) = self.e_const {
            if !(c > 0.0 && c < 1.0) {
                return Err(UsageError(format!("--e-const must lie in (0, 1), got {c}")).into());
            }
            return Ok(Propensities {
                e_values: vec![c; dataset.n()],
                info: PropensityInfo {
                    source: "constant",
                    constant: Some(c),
                    fit: None,
                },
                source: PropensitySource::Fixed,
            });
        }
        if self.no_fit {
            let model = WpsModel::zero(dataset.covariate_dim(), crtrecruit::data::design_ratio(dataset))?;
            return Ok(Propensities {
                e_values: model.propensities(dataset)?,
                info: PropensityInfo {
                    source: "alpha-zero",
                    constant: None,
                    fit: None,
                },
                source: PropensitySource::Fixed,
            });
        }
        let fitted = fit(dataset, None, &settings).context("fitting the working propensity model")?;
        let e_values = fitted.model.propensities(dataset)?;
        let source = PropensitySource::Refit {
            settings,
            init: FitInit {
                alpha: Some(fitted.model.alpha.clone()),
                inverse_hessian: fitted.inverse_hessian.clone(),
            },
        };
        Ok(Propensities {
            e_values,
            info: PropensityInfo {
                source: "fitted",
                constant: None,
                fit: Some(fitted),
            },
            source,
        })
    }
}

pub fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(UsageError(format!("--level must lie in (0, 1), got {level}")).into())
    }
}

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(row)?;
    }
    Ok(wtr.into_inner().map_err(|e| e.into_error())?)
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
