//! Recruited-sample data model, CSV ingestion and arm-wise diagnostics.
//!
//! Rows are stored flat (row-major covariates, one outcome and one arm flag
//! per row) with clusters kept as contiguous spans, which keeps the
//! pseudo-likelihood and weighting loops cache friendly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One recruited individual.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub covariates: Vec<f64>,
    pub outcome: f64,
}

/// A cluster with its arm and recruited individuals, as supplied by callers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: String,
    pub treated: bool,
    pub individuals: Vec<Individual>,
}

/// A cluster inside a [`RecruitedDataset`]: its rows are `start..start + len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpan {
    pub id: String,
    pub treated: bool,
    pub start: usize,
    pub len: usize,
}

impl ClusterSpan {
    pub fn rows(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// The observed sample of a cluster randomized experiment: recruited
/// individuals only, grouped by cluster, plus the known cluster
/// randomization probability.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct RecruitedDataset {
    clusters: Vec<ClusterSpan>,
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
    treated: Vec<bool>,
    covariate_dim: usize,
    covariate_names: Vec<String>,
    design_treatment_prob: f64,
}

impl RecruitedDataset {
    /// Builds and validates a dataset from cluster records.
    pub fn from_clusters(records: Vec<ClusterRecord>, design_treatment_prob: f64) -> Result<Self> {
        let dim = records
            .iter()
            .flat_map(|c| c.individuals.first())
            .map(|i| i.covariates.len())
            .next()
            .unwrap_or(0);
        let names = (1..=dim).map(|k| format!("x{k}")).collect();
        let mut builder = DatasetBuilder::new(dim, names);
        for rec in records {
            builder.begin_cluster(rec.cluster_id, rec.treated);
            for ind in rec.individuals {
                builder.push_row(&ind.covariates, ind.outcome)?;
            }
        }
        builder.finish(design_treatment_prob)
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// The known cluster randomization probability `P(Z = 1)`.
    pub fn design_treatment_prob(&self) -> f64 {
        self.design_treatment_prob
    }

    pub fn clusters(&self) -> &[ClusterSpan] {
        &self.clusters
    }

    /// Covariates of row `i` (without intercept).
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.covariate_dim;
        &self.covariates[i * d..(i + 1) * d]
    }

    /// Row-major `n x d` covariate matrix.
    pub fn covariate_matrix(&self) -> &[f64] {
        &self.covariates
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Per-row arm indicator.
    pub fn treatment(&self) -> &[bool] {
        &self.treated
    }

    pub fn n_treated_clusters(&self) -> usize {
        self.clusters.iter().filter(|c| c.treated).count()
    }

    pub fn n_control_clusters(&self) -> usize {
        self.n_clusters() - self.n_treated_clusters()
    }

    /// Number of recruited individuals in treated clusters.
    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&t| t).count()
    }

    /// Same rows, different randomization probability.
    pub fn with_design_treatment_prob(&self, design_treatment_prob: f64) -> Result<Self> {
        check_probability(design_treatment_prob)?;
        let mut out = self.clone();
        out.design_treatment_prob = design_treatment_prob;
        Ok(out)
    }

    /// Builds a new dataset from the clusters at `indices` (repeats allowed),
    /// carrying every individual of each chosen cluster. Also returns, for each
    /// new row, the index of the row it was copied from.
    pub fn resample_clusters(&self, indices: &[usize]) -> Result<(Self, Vec<usize>)> {
        let d = self.covariate_dim;
        let total: usize = indices.iter().map(|&j| self.clusters[j].len).sum();
        let mut clusters = Vec::with_capacity(indices.len());
        let mut covariates = Vec::with_capacity(total * d);
        let mut outcomes = Vec::with_capacity(total);
        let mut treated = Vec::with_capacity(total);
        let mut origin = Vec::with_capacity(total);
        for &j in indices {
            let span = self
                .clusters
                .get(j)
                .ok_or_else(|| Error::InvalidInput(format!("cluster index {j} out of range")))?;
            clusters.push(ClusterSpan {
                id: span.id.clone(),
                treated: span.treated,
                start: outcomes.len(),
                len: span.len,
            });
            covariates.extend_from_slice(&self.covariates[span.start * d..(span.start + span.len) * d]);
            outcomes.extend_from_slice(&self.outcomes[span.rows()]);
            treated.extend(std::iter::repeat_n(span.treated, span.len));
            origin.extend(span.rows());
        }
        let out = Self {
            clusters,
            covariates,
            outcomes,
            treated,
            covariate_dim: d,
            covariate_names: self.covariate_names.clone(),
            design_treatment_prob: self.design_treatment_prob,
        };
        out.validate()?;
        Ok((out, origin))
    }

    /// Cluster records in dataset order.
    pub fn to_records(&self) -> Vec<ClusterRecord> {
        self.clusters
            .iter()
            .map(|c| ClusterRecord {
                cluster_id: c.id.clone(),
                treated: c.treated,
                individuals: c
                    .rows()
                    .map(|i| Individual {
                        covariates: self.row(i).to_vec(),
                        outcome: self.outcomes[i],
                    })
                    .collect(),
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        check_probability(self.design_treatment_prob)?;
        if let Some(c) = self.clusters.iter().find(|c| c.len == 0) {
            return Err(Error::Design(format!(
                "cluster {:?} has no recruited individuals",
                c.id
            )));
        }
        let treated = self.n_treated_clusters();
        if treated == 0 || treated == self.clusters.len() {
            return Err(Error::Design(format!(
                "both arms need at least one cluster (treated: {treated}, control: {})",
                self.clusters.len() - treated
            )));
        }
        Ok(())
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "design treatment probability must lie strictly inside (0, 1), got {p}"
        )))
    }
}

/// Incremental construction of a [`RecruitedDataset`], one cluster at a time.
#[derive(Debug)]
pub struct DatasetBuilder {
    dim: usize,
    names: Vec<String>,
    clusters: Vec<ClusterSpan>,
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
    treated: Vec<bool>,
}

impl DatasetBuilder {
    pub fn new(covariate_dim: usize, covariate_names: Vec<String>) -> Self {
        Self {
            dim: covariate_dim,
            names: covariate_names,
            clusters: Vec::new(),
            covariates: Vec::new(),
            outcomes: Vec::new(),
            treated: Vec::new(),
        }
    }

    pub fn begin_cluster(&mut self, id: impl Into<String>, treated: bool) {
        self.clusters.push(ClusterSpan {
            id: id.into(),
            treated,
            start: self.outcomes.len(),
            len: 0,
        });
    }

    /// Appends a row to the most recently opened cluster.
    pub fn push_row(&mut self, covariates: &[f64], outcome: f64) -> Result<()> {
        if covariates.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: covariates.len(),
            });
        }
        if !outcome.is_finite() || covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: self.outcomes.len() + 1,
                message: "non-finite value".into(),
            });
        }
        let cluster = self
            .clusters
            .last_mut()
            .ok_or_else(|| Error::InvalidInput("push_row called before begin_cluster".into()))?;
        cluster.len += 1;
        self.covariates.extend_from_slice(covariates);
        self.outcomes.push(outcome);
        self.treated.push(cluster.treated);
        Ok(())
    }

    pub fn finish(self, design_treatment_prob: f64) -> Result<RecruitedDataset> {
        let ds = RecruitedDataset {
            clusters: self.clusters,
            covariates: self.covariates,
            outcomes: self.outcomes,
            treated: self.treated,
            covariate_dim: self.dim,
            covariate_names: self.names,
            design_treatment_prob,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// `r = P(Z = 1) / P(Z = 0)`.
pub fn design_ratio(dataset: &RecruitedDataset) -> f64 {
    let p = dataset.design_treatment_prob();
    p / (1.0 - p)
}

/// Column names used to read a recruited sample from CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub cluster: String,
    pub treatment: String,
    pub outcome: String,
    /// `None` selects every remaining column, in header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            cluster: "cluster".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, design_treatment_prob: f64) -> Result<RecruitedDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, design_treatment_prob)
}

/// Reads a headed CSV. Rows are grouped by cluster id in order of first
/// appearance; `row` in parse errors is the 1-based data row (header excluded).
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, design_treatment_prob: f64) -> Result<RecruitedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(0, e))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            message: format!("missing column {name:?}"),
        })
    };
    let cluster_col = find(&schema.cluster)?;
    let treat_col = find(&schema.treatment)?;
    let outcome_col = find(&schema.outcome)?;
    let (cov_cols, cov_names): (Vec<usize>, Vec<String>) = match &schema.covariates {
        Some(cols) => {
            let idx = cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
            (idx, cols.clone())
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![cluster_col, treat_col, outcome_col].contains(i))
            .map(|(i, h)| (i, h.to_string()))
            .unzip(),
    };

    struct Pending {
        id: String,
        treated: bool,
        rows: Vec<(Vec<f64>, f64)>,
    }
    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (k, record) in rdr.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| csv_error(row, e))?;
        let field = |col: usize, what: &str| -> Result<&str> {
            match record.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    message: format!("missing value for {what}"),
                }),
            }
        };
        let number = |col: usize, what: &str| -> Result<f64> {
            let raw = field(col, what)?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric value {raw:?} for {what}"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    row,
                    message: format!("non-finite value {raw:?} for {what}"),
                })
            }
        };
        let id = field(cluster_col, &schema.cluster)?.to_string();
        let treated = match number(treat_col, &schema.treatment)? {
            0.0 => false,
            1.0 => true,
            z => {
                return Err(Error::Parse {
                    row,
                    message: format!("treatment must be 0 or 1, got {z}"),
                })
            }
        };
        let outcome = number(outcome_col, &schema.outcome)?;
        let x = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| number(c, name))
            .collect::<Result<Vec<_>>>()?;

        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Pending {
                id: id.clone(),
                treated,
                rows: Vec::new(),
            });
            order.len() - 1
        });
        let pending = &mut order[slot];
        if pending.treated != treated {
            return Err(Error::Consistency(format!(
                "treatment varies within cluster {id:?} (row {row})"
            )));
        }
        pending.rows.push((x, outcome));
    }

    let mut builder = DatasetBuilder::new(cov_cols.len(), cov_names);
    for p in order {
        builder.begin_cluster(p.id, p.treated);
        for (x, y) in p.rows {
            builder.push_row(&x, y)?;
        }
    }
    builder.finish(design_treatment_prob)
}

fn csv_error(row: usize, e: csv::Error) -> Error {
    Error::Parse {
        row,
        message: e.to_string(),
    }
}

/// Writes the dataset as CSV with columns `cluster,treatment,outcome,<covariates>`.
/// Numbers use the shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(dataset: &RecruitedDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_string(), "treatment".into(), "outcome".into()];
    header.extend(dataset.covariate_names().iter().cloned());
    wtr.write_record(&header).map_err(|e| csv_error(0, e))?;
    for c in dataset.clusters() {
        for i in c.rows() {
            let mut rec = vec![
                c.id.clone(),
                if c.treated { "1" } else { "0" }.to_string(),
                format!("{}", dataset.outcomes()[i]),
            ];
            rec.extend(dataset.row(i).iter().map(|v| format!("{v}")));
            wtr.write_record(&rec).map_err(|e| csv_error(i + 1, e))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Descriptive statistics for one arm.
#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub treated: bool,
    pub clusters: usize,
    pub recruited: usize,
    pub outcome_mean: f64,
    pub outcome_sd: f64,
    pub covariate_means: Vec<f64>,
    pub covariate_sds: Vec<f64>,
}

/// Arm-wise balance diagnostics of a recruited sample.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub covariate_names: Vec<String>,
    pub control: ArmSummary,
    pub treated: ArmSummary,
    /// Treated minus control, per covariate.
    pub covariate_mean_differences: Vec<f64>,
    pub outcome_mean_difference: f64,
}

pub fn summarize(dataset: &RecruitedDataset) -> Diagnostics {
    let arm = |treated: bool| {
        let rows: Vec<usize> = (0..dataset.n())
            .filter(|&i| dataset.treatment()[i] == treated)
            .collect();
        let clusters = dataset.clusters().iter().filter(|c| c.treated == treated).count();
        let (outcome_mean, outcome_sd) = mean_sd(rows.iter().map(|&i| dataset.outcomes()[i]));
        let (covariate_means, covariate_sds) = (0..dataset.covariate_dim())
            .map(|k| mean_sd(rows.iter().map(|&i| dataset.row(i)[k])))
            .unzip();
        ArmSummary {
            treated,
            clusters,
            recruited: rows.len(),
            outcome_mean,
            outcome_sd,
            covariate_means,
            covariate_sds,
        }
    };
    let control = arm(false);
    let treated = arm(true);
    let covariate_mean_differences = treated
        .covariate_means
        .iter()
        .zip(&control.covariate_means)
        .map(|(t, c)| t - c)
        .collect();
    Diagnostics {
        covariate_names: dataset.covariate_names().to_vec(),
        outcome_mean_difference: treated.outcome_mean - control.outcome_mean,
        control,
        treated,
        covariate_mean_differences,
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for a single value).
fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "cluster,treatment,outcome,x\nA,1,1,0.5\nA,1,3,1.5\nB,0,0,2\nB,0,2,-1\n";

    fn toy() -> RecruitedDataset {
        read_csv(TOY.as_bytes(), &CsvSchema::default(), 0.5).unwrap()
    }

    #[test]
    fn loads_toy_file() {
        let ds = toy();
        assert_eq!(ds.n_clusters(), 2);
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.covariate_dim(), 1);
        assert_eq!(ds.n_treated_clusters() + ds.n_control_clusters(), ds.n_clusters());
        assert_eq!(ds.clusters().iter().map(|c| c.len).sum::<usize>(), ds.n());
        assert_eq!(ds.outcomes(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn groups_interleaved_rows_by_cluster() {
        let csv = "cluster,treatment,outcome,x\nA,1,1,0\nB,0,0,0\nA,1,3,0\nB,0,2,0\n";
        let ds = read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5).unwrap();
        assert_eq!(ds.clusters()[0].id, "A");
        assert_eq!(&ds.outcomes()[ds.clusters()[0].rows()], &[1.0, 3.0]);
        assert_eq!(&ds.outcomes()[ds.clusters()[1].rows()], &[0.0, 2.0]);
    }

    #[test]
    fn treatment_varying_within_cluster_is_rejected() {
        let csv = "cluster,treatment,outcome,x\nA,0,1,0\nA,1,3,0\nB,0,0,0\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn single_arm_is_a_design_error() {
        let csv = "cluster,treatment,outcome,x\nA,1,1,0\nB,1,3,0\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5).unwrap_err();
        assert!(matches!(err, Error::Design(_)), "{err}");
    }

    #[test]
    fn parse_errors_carry_row_index() {
        let csv = "cluster,treatment,outcome,x\nA,1,1,0\nB,0,abc,0\n";
        match read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
        let csv = "cluster,treatment,outcome,x\nA,1,1,\nB,0,1,0\n";
        match read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 1),
            e => panic!("unexpected {e}"),
        }
        let csv = "cluster,treatment,outcome,x\nA,2,1,0\nB,0,1,0\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn missing_column_is_reported() {
        let schema = CsvSchema {
            covariates: Some(vec!["age".into()]),
            ..CsvSchema::default()
        };
        assert!(matches!(
            read_csv(TOY.as_bytes(), &schema, 0.5),
            Err(Error::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn design_probability_must_be_interior() {
        assert!(read_csv(TOY.as_bytes(), &CsvSchema::default(), 1.0).is_err());
        assert!(read_csv(TOY.as_bytes(), &CsvSchema::default(), 0.0).is_err());
    }

    #[test]
    fn design_ratio_values() {
        let ds = toy();
        assert_eq!(design_ratio(&ds), 1.0);
        let q = ds.with_design_treatment_prob(0.25).unwrap();
        assert!((design_ratio(&q) - 1.0 / 3.0).abs() < 1e-15);
        let artemis = ds.with_design_treatment_prob(108.0 / 203.0).unwrap();
        // 108 / 95
        assert!((design_ratio(&artemis) - 1.136_842_105_263_158).abs() < 1e-12);
    }

    #[test]
    fn summary_of_toy() {
        let s = summarize(&toy());
        assert_eq!(s.treated.outcome_mean, 2.0);
        assert_eq!(s.control.outcome_mean, 1.0);
        assert_eq!(s.outcome_mean_difference, 1.0);
        assert_eq!(s.treated.clusters + s.control.clusters, 2);
        assert_eq!(s.treated.covariate_means, vec![1.0]);
        assert_eq!(s.control.covariate_means, vec![0.5]);
    }

    #[test]
    fn constant_covariate_has_equal_arm_means() {
        let csv = "cluster,treatment,outcome,x\nA,1,1,7\nA,1,3,7\nB,0,0,7\n";
        let s = summarize(&read_csv(csv.as_bytes(), &CsvSchema::default(), 0.5).unwrap());
        assert_eq!(s.treated.covariate_means, vec![7.0]);
        assert_eq!(s.control.covariate_means, vec![7.0]);
        assert_eq!(s.covariate_mean_differences, vec![0.0]);
    }

    #[test]
    fn resampling_carries_whole_clusters() {
        let ds = toy();
        let (rs, origin) = ds.resample_clusters(&[0, 0, 1]).unwrap();
        assert_eq!(rs.n(), 6);
        assert_eq!(origin, vec![0, 1, 0, 1, 2, 3]);
        assert_eq!(rs.outcomes(), &[1.0, 3.0, 1.0, 3.0, 0.0, 2.0]);
        assert!(matches!(ds.resample_clusters(&[0, 0]), Err(Error::Design(_))));
    }

    #[test]
    fn from_clusters_matches_csv() {
        let ds = toy();
        let rebuilt = RecruitedDataset::from_clusters(ds.to_records(), 0.5).unwrap();
        assert_eq!(rebuilt.outcomes(), ds.outcomes());
        assert_eq!(rebuilt.covariate_matrix(), ds.covariate_matrix());
    }
}
