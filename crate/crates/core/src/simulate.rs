//! Monte Carlo engine for cluster randomized trials with post-randomization
//! recruitment.
//!
//! Each cluster holds a fixed number of individuals with three individual
//! covariates `(V1, V2, V3)` and two cluster covariates `(V1c, V2c)`. Potential
//! outcomes carry a cluster random effect. Recruitment under control follows a
//! logistic model; recruitment under treatment is drawn conditionally on it so
//! that monotonicity holds and `P(R(1) = 1 | x) / P(R(0) = 1 | x) = delta(x)`.
//!
//! Scenario labels have the form `B-1-balanced`, optionally followed by
//! `-violation` (recruitment under control also depends on the potential
//! outcomes) and `-J200`, `-J500` or `-J800` (default 500 clusters).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{design_ratio, DatasetBuilder, RecruitedDataset};
use crate::error::{Error, Result};
use crate::estimators::{estimate_from_propensities, naive_difference, Estimand, EstimateConfig, DEFAULT_NU_GUARD};
use crate::inference::{
    bootstrap_estimands, cluster_bootstrap, replicate_estimates, sandwich, BootstrapConfig, PropensitySource,
    SandwichConfig, SANDWICH_ESTIMANDS,
};
use crate::wps::{fit, FitInit, FitSettings, WpsModel};

pub const COVARIATE_NAMES: [&str; 5] = ["V1", "V2", "V3", "V1c", "V2c"];
pub const CLUSTER_SIZE: usize = 100;
pub const DEFAULT_CLUSTERS: usize = 500;
pub const CLUSTER_COUNTS: [usize; 3] = [200, 500, 800];

/// Outcome-model coefficients on `(1, V1, V2, V3, V1c, V2c)`.
pub const BETA_Y1: [f64; 6] = [2.0, -1.0, 3.0, 0.1, -0.1, 0.3];
pub const BETA_Y0: [f64; 6] = [0.0, -0.5, 1.0, 0.1, -0.2, 0.3];

const BETA_R0_SLOPES: [f64; 5] = [0.3, -0.6, 0.0, 0.1, -0.3];
const ALPHA_SLOPES: [[f64; 5]; 2] = [[0.3, -0.5, -0.1, 0.0, -0.15], [0.2, -0.3, -0.1, 0.0, -0.15]];
/// Coefficients on `(Y(0), Y(1))` in the outcome-dependent recruitment model.
const BETA_R0_OUTCOMES: [f64; 2] = [0.2, -0.12];

/// Intercepts per scenario (A, B, C): recruitment under control, then the
/// working-propensity intercept for cases 1 and 2.
const INTERCEPTS: [(f64, [f64; 2]); 3] = [
    (-0.99, [0.275, 0.160]),
    (-0.70, [0.275, 0.160]),
    (-1.35, [-0.235, -0.340]),
];
const VIOLATION_INTERCEPTS: [(f64, [f64; 2]); 3] = [
    (-0.7, [0.270, 0.160]),
    (-0.4, [0.272, 0.177]),
    (-1.07, [-0.268, -0.355]),
];

/// Target (always, incentivized, never) prevalences per scenario.
pub const STRATUM_TARGETS: [[f64; 3]; 3] = [[0.20, 0.20, 0.60], [0.25, 0.25, 0.50], [0.15, 0.25, 0.60]];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimScenario {
    pub label: String,
    /// `'A'`, `'B'` or `'C'`.
    pub family: char,
    /// 1 or 2.
    pub case: u8,
    pub clusters: usize,
    pub cluster_size: usize,
    pub treat_frac: f64,
    /// Intercept and covariate coefficients of `logit P(R(0) = 1)`, followed
    /// by coefficients on `Y(0)` and `Y(1)` in the violation variant.
    pub beta_r0: Vec<f64>,
    pub alpha: [f64; 6],
    pub beta_y1: [f64; 6],
    pub beta_y0: [f64; 6],
    pub sigma2: f64,
    pub icc: f64,
    pub violation: bool,
}

fn bad_label(label: &str) -> Error {
    Error::InvalidInput(format!(
        "unknown scenario {label:?}; expected e.g. B-1-balanced, A-2-imbalanced-violation or C-1-balanced-J800"
    ))
}

impl SimScenario {
    pub fn from_label(label: &str) -> Result<Self> {
        let parts: Vec<&str> = label.split('-').collect();
        if parts.len() < 3 || parts.len() > 5 {
            return Err(bad_label(label));
        }
        let family = match parts[0] {
            "A" => 'A',
            "B" => 'B',
            "C" => 'C',
            _ => return Err(bad_label(label)),
        };
        let case: u8 = match parts[1] {
            "1" => 1,
            "2" => 2,
            _ => return Err(bad_label(label)),
        };
        let treat_frac = match parts[2] {
            "balanced" => 0.5,
            "imbalanced" => 0.25,
            _ => return Err(bad_label(label)),
        };
        let mut violation = false;
        let mut clusters = DEFAULT_CLUSTERS;
        let mut rest = &parts[3..];
        if rest.first() == Some(&"violation") {
            violation = true;
            rest = &rest[1..];
        }
        if let Some(tag) = rest.first() {
            clusters = tag
                .strip_prefix('J')
                .and_then(|n| n.parse().ok())
                .filter(|n| CLUSTER_COUNTS.contains(n))
                .ok_or_else(|| bad_label(label))?;
            rest = &rest[1..];
        }
        if !rest.is_empty() {
            return Err(bad_label(label));
        }

        let fi = (family as u8 - b'A') as usize;
        let (r0_intercept, alpha_intercepts) = if violation {
            VIOLATION_INTERCEPTS[fi]
        } else {
            INTERCEPTS[fi]
        };
        let mut beta_r0 = vec![r0_intercept];
        beta_r0.extend(BETA_R0_SLOPES);
        if violation {
            beta_r0.extend(BETA_R0_OUTCOMES);
        }
        let mut alpha = [alpha_intercepts[case as usize - 1]; 6];
        alpha[1..].copy_from_slice(&ALPHA_SLOPES[case as usize - 1]);

        let mut out = Self {
            label: String::new(),
            family,
            case,
            clusters,
            cluster_size: CLUSTER_SIZE,
            treat_frac,
            beta_r0,
            alpha,
            beta_y1: BETA_Y1,
            beta_y0: BETA_Y0,
            sigma2: 1.0,
            icc: 0.1,
            violation,
        };
        out.label = out.canonical_label();
        Ok(out)
    }

    pub fn canonical_label(&self) -> String {
        format!(
            "{}-{}-{}{}-J{}",
            self.family,
            self.case,
            if self.treat_frac == 0.5 {
                "balanced"
            } else {
                "imbalanced"
            },
            if self.violation { "-violation" } else { "" },
            self.clusters
        )
    }

    pub fn with_clusters(mut self, clusters: usize) -> Self {
        self.clusters = clusters;
        self.label = self.canonical_label();
        self
    }

    pub fn n_treated_clusters(&self) -> usize {
        (self.treat_frac * self.clusters as f64).round() as usize
    }

    /// Realized treated share `m / J`.
    pub fn design_treatment_prob(&self) -> f64 {
        self.n_treated_clusters() as f64 / self.clusters as f64
    }

    /// Target (always, incentivized, never) prevalences.
    pub fn stratum_targets(&self) -> [f64; 3] {
        STRATUM_TARGETS[(self.family as u8 - b'A') as usize]
    }

    /// The data-generating working propensity model at the realized design.
    pub fn true_model(&self) -> Result<WpsModel> {
        let p = self.design_treatment_prob();
        WpsModel::new(self.alpha.to_vec(), p / (1.0 - p))
    }

    fn validate(&self) -> Result<()> {
        let expected = if self.violation { 8 } else { 6 };
        if self.beta_r0.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: self.beta_r0.len(),
            });
        }
        let m = self.n_treated_clusters();
        if self.clusters < 2 || m == 0 || m == self.clusters || self.cluster_size == 0 {
            return Err(Error::InvalidInput(format!(
                "{} clusters with {m} treated cannot form two arms",
                self.clusters
            )));
        }
        if !(self.sigma2 > 0.0) || !(0.0..=1.0).contains(&self.icc) {
            return Err(Error::InvalidInput("sigma2 must be positive and icc in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Every registered scenario label: 36 under ignorable recruitment followed
/// by their 36 outcome-dependent counterparts.
pub fn scenario_labels() -> Vec<String> {
    let mut out = Vec::with_capacity(72);
    for violation in [false, true] {
        for family in ["A", "B", "C"] {
            for case in ["1", "2"] {
                for design in ["balanced", "imbalanced"] {
                    for j in CLUSTER_COUNTS {
                        let v = if violation { "-violation" } else { "" };
                        out.push(format!("{family}-{case}-{design}{v}-J{j}"));
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stratum {
    #[serde(rename = "a")]
    Always,
    #[serde(rename = "c")]
    Incentivized,
    #[serde(rename = "n")]
    Never,
}

impl Stratum {
    pub fn from_potential_recruitment(r0: bool, r1: bool) -> Self {
        match (r0, r1) {
            (true, _) => Stratum::Always,
            (false, true) => Stratum::Incentivized,
            (false, false) => Stratum::Never,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stratum::Always => "a",
            Stratum::Incentivized => "c",
            Stratum::Never => "n",
        }
    }
}

/// A full simulated trial: every individual, recruited or not.
#[derive(Debug, Clone)]
pub struct SimPopulation {
    pub scenario: SimScenario,
    pub cluster_treated: Vec<bool>,
    /// Row-major, `COVARIATE_NAMES` order.
    pub covariates: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub r0: Vec<bool>,
    pub r1: Vec<bool>,
    pub strata: Vec<Stratum>,
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 3.0 {
            return v;
        }
    }
}

fn dot(beta: &[f64], x: &[f64; 6]) -> f64 {
    beta.iter().zip(x).map(|(b, v)| b * v).sum()
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Population for `scenario`; each `stream` is an independent draw under the
/// same `seed`.
pub fn generate_stream(scenario: &SimScenario, seed: u64, stream: u64) -> Result<SimPopulation> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let j = scenario.clusters;
    let size = scenario.cluster_size;
    let mut order: Vec<usize> = (0..j).collect();
    order.shuffle(&mut rng);
    let mut cluster_treated = vec![false; j];
    for &c in &order[..scenario.n_treated_clusters()] {
        cluster_treated[c] = true;
    }

    let between =
        Normal::new(0.0, (scenario.sigma2 * scenario.icc).sqrt()).map_err(|e| Error::Generation(e.to_string()))?;
    let within = Normal::new(0.0, (scenario.sigma2 * (1.0 - scenario.icc)).sqrt())
        .map_err(|e| Error::Generation(e.to_string()))?;

    let n = j * size;
    let mut pop = SimPopulation {
        scenario: scenario.clone(),
        cluster_treated,
        covariates: Vec::with_capacity(n * 5),
        y0: Vec::with_capacity(n),
        y1: Vec::with_capacity(n),
        r0: Vec::with_capacity(n),
        r1: Vec::with_capacity(n),
        strata: Vec::with_capacity(n),
    };
    for c in 0..j {
        let v1c = truncated_normal(&mut rng);
        let v2c = f64::from(u8::from(rng.random_bool(0.5)));
        let eps_c = between.sample(&mut rng);
        for i in 0..size {
            let v1 = truncated_normal(&mut rng);
            let v2 = f64::from(u8::from(rng.random_bool(0.5)));
            let v3 = truncated_normal(&mut rng);
            let x = [1.0, v1, v2, v3, v1c, v2c];
            let eps = within.sample(&mut rng) + eps_c;
            let y0 = dot(&scenario.beta_y0, &x) + eps;
            let y1 = dot(&scenario.beta_y1, &x) + eps;
            let mut eta0 = dot(&scenario.beta_r0[..6], &x);
            if scenario.violation {
                eta0 += scenario.beta_r0[6] * y0 + scenario.beta_r0[7] * y1;
            }
            let r0 = rng.random::<f64>() < expit(eta0);
            let r1 = if r0 {
                true
            } else {
                // P(R(1) = 1 | R(0) = 0) = (delta - 1) exp(eta0).
                let p = (eta0 - dot(&scenario.alpha, &x)).exp();
                if p > 1.0 {
                    return Err(Error::Generation(format!(
                        "treated recruitment probability {p:.6} exceeds 1 for individual {i} of cluster {c}"
                    )));
                }
                rng.random::<f64>() < p
            };
            pop.covariates.extend_from_slice(&x[1..]);
            pop.y0.push(y0);
            pop.y1.push(y1);
            pop.r0.push(r0);
            pop.r1.push(r1);
            pop.strata.push(Stratum::from_potential_recruitment(r0, r1));
        }
    }
    Ok(pop)
}

pub fn generate(scenario: &SimScenario, seed: u64) -> Result<SimPopulation> {
    generate_stream(scenario, seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleTruths {
    pub tau_o: f64,
    /// Effect among those recruited under the realized assignment.
    pub tau_r: f64,
    pub tau_a: Option<f64>,
    pub tau_ac: Option<f64>,
    pub tau_c: Option<f64>,
    /// Shares of the always, incentivized and never strata.
    pub prevalences: [f64; 3],
    /// Always-recruited share among always- and incentivized-recruited.
    pub nu: Option<f64>,
}

impl SampleTruths {
    pub fn get(&self, estimand: Estimand) -> Option<f64> {
        match estimand {
            Estimand::TauR => Some(self.tau_r),
            Estimand::TauA => self.tau_a,
            Estimand::TauAc => self.tau_ac,
            Estimand::TauC => self.tau_c,
            Estimand::Nu => self.nu,
        }
    }
}

impl SimPopulation {
    pub fn n(&self) -> usize {
        self.y0.len()
    }

    pub fn treated(&self, i: usize) -> bool {
        self.cluster_treated[i / self.scenario.cluster_size]
    }

    pub fn recruited(&self, i: usize) -> bool {
        if self.treated(i) {
            self.r1[i]
        } else {
            self.r0[i]
        }
    }

    pub fn covariates_of(&self, i: usize) -> &[f64] {
        &self.covariates[5 * i..5 * i + 5]
    }

    /// The observed data: recruited individuals with their realized outcome.
    pub fn recruited_dataset(&self) -> Result<RecruitedDataset> {
        let mut b = DatasetBuilder::new(5, COVARIATE_NAMES.iter().map(|s| s.to_string()).collect());
        let size = self.scenario.cluster_size;
        for (c, &z) in self.cluster_treated.iter().enumerate() {
            let rows: Vec<usize> = (c * size..(c + 1) * size).filter(|&i| self.recruited(i)).collect();
            if rows.is_empty() {
                continue;
            }
            b.begin_cluster(c.to_string(), z);
            for i in rows {
                b.push_row(self.covariates_of(i), if z { self.y1[i] } else { self.y0[i] })?;
            }
        }
        b.finish(self.scenario.design_treatment_prob())
    }

    /// Data-generating propensities for the rows of `dataset`.
    pub fn true_propensities(&self, dataset: &RecruitedDataset) -> Result<Vec<f64>> {
        WpsModel::new(self.scenario.alpha.to_vec(), design_ratio(dataset))?.propensities(dataset)
    }

    pub fn truths(&self) -> SampleTruths {
        sample_truths(self)
    }

    /// Full population as CSV, one row per individual.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["cluster", "treatment"];
        header.extend(COVARIATE_NAMES);
        header.extend(["y0", "y1", "r0", "r1", "stratum", "recruited"]);
        wtr.write_record(&header).map_err(io_error)?;
        let b = |v: bool| if v { "1" } else { "0" };
        for i in 0..self.n() {
            let mut rec = vec![
                (i / self.scenario.cluster_size).to_string(),
                b(self.treated(i)).to_string(),
            ];
            rec.extend(self.covariates_of(i).iter().map(|v| v.to_string()));
            rec.extend([
                self.y0[i].to_string(),
                self.y1[i].to_string(),
                b(self.r0[i]).into(),
                b(self.r1[i]).into(),
                self.strata[i].label().into(),
                b(self.recruited(i)).into(),
            ]);
            wtr.write_record(&rec).map_err(io_error)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn io_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Finite-population effects of the realized trial.
pub fn sample_truths(pop: &SimPopulation) -> SampleTruths {
    #[derive(Default)]
    struct Acc(f64, usize);
    impl Acc {
        fn add(&mut self, v: f64) {
            self.0 += v;
            self.1 += 1;
        }
        fn mean(&self) -> Option<f64> {
            (self.1 > 0).then(|| self.0 / self.1 as f64)
        }
    }
    let (mut all, mut rec, mut a, mut ac, mut c) = (
        Acc::default(),
        Acc::default(),
        Acc::default(),
        Acc::default(),
        Acc::default(),
    );
    let mut counts = [0usize; 3];
    for i in 0..pop.n() {
        let d = pop.y1[i] - pop.y0[i];
        all.add(d);
        if pop.recruited(i) {
            rec.add(d);
        }
        match pop.strata[i] {
            Stratum::Always => {
                counts[0] += 1;
                a.add(d);
                ac.add(d);
            }
            Stratum::Incentivized => {
                counts[1] += 1;
                c.add(d);
                ac.add(d);
            }
            Stratum::Never => counts[2] += 1,
        }
    }
    let n = pop.n() as f64;
    SampleTruths {
        tau_o: all.mean().unwrap_or(f64::NAN),
        tau_r: rec.mean().unwrap_or(f64::NAN),
        tau_a: a.mean(),
        tau_ac: ac.mean(),
        tau_c: c.mean(),
        prevalences: counts.map(|k| k as f64 / n),
        nu: (counts[0] + counts[1] > 0).then(|| counts[0] as f64 / (counts[0] + counts[1]) as f64),
    }
}

/// What each study replicate computes beyond the estimated-propensity point
/// estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub n_reps: usize,
    pub seed: u64,
    pub fit: FitSettings,
    pub level: f64,
    pub nu_guard: f64,
    /// Known-propensity estimates with sandwich intervals.
    pub known_sandwich: bool,
    /// Cluster-bootstrap replicates with re-fitted propensities; 0 disables.
    pub bootstrap_replicates: usize,
    /// Worker threads; `None` uses the ambient rayon pool.
    pub threads: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_reps: 100,
            seed: 0,
            fit: FitSettings::default(),
            level: 0.95,
            nu_guard: DEFAULT_NU_GUARD,
            known_sandwich: true,
            bootstrap_replicates: 0,
            threads: None,
        }
    }
}

/// One interval from one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalRecord {
    pub estimand: Estimand,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub truths: SampleTruths,
    pub n_recruited: usize,
    pub naive: f64,
    pub alpha_hat: Vec<f64>,
    pub nu_hat: f64,
    pub tau_r: f64,
    pub tau_a: f64,
    pub tau_ac: f64,
    pub tau_c: Option<f64>,
    /// Known-propensity `(tau_a, tau_c, tau_R)` with `nu` at its sample truth.
    pub known: Option<[f64; 3]>,
    pub sandwich: Vec<IntervalRecord>,
    pub bootstrap_normal: Vec<IntervalRecord>,
    pub bootstrap_percentile: Vec<IntervalRecord>,
    pub bootstrap_failures: usize,
}

impl ReplicateRecord {
    pub fn estimate(&self, estimand: Estimand) -> Option<f64> {
        match estimand {
            Estimand::TauR => Some(self.tau_r),
            Estimand::TauA => Some(self.tau_a),
            Estimand::TauAc => Some(self.tau_ac),
            Estimand::TauC => self.tau_c,
            Estimand::Nu => Some(self.nu_hat),
        }
    }

    pub fn known_estimate(&self, estimand: Estimand) -> Option<f64> {
        let k = SANDWICH_ESTIMANDS.iter().position(|e| *e == estimand)?;
        self.known.map(|v| v[k]).filter(|v| v.is_finite())
    }
}

/// Runs one replicate of the study.
pub fn run_replicate(scenario: &SimScenario, config: &StudyConfig, replicate: usize) -> Result<ReplicateRecord> {
    let pop = generate_stream(scenario, config.seed, replicate as u64)?;
    let truths = sample_truths(&pop);
    let ds = pop.recruited_dataset()?;
    let est_cfg = EstimateConfig {
        nu_guard: config.nu_guard,
    };

    let fitted = fit(&ds, None, &config.fit)?;
    let e_hat = fitted.model.propensities(&ds)?;
    let report = estimate_from_propensities(&ds, &e_hat, &est_cfg)?;

    let mut known = None;
    let mut sandwich_records = Vec::new();
    if config.known_sandwich {
        if let Some(nu_true) = truths.nu {
            let e_true = pop.true_propensities(&ds)?;
            let s = sandwich(
                &ds,
                &e_true,
                nu_true,
                &SandwichConfig {
                    level: config.level,
                    nu_guard: config.nu_guard,
                },
            )?;
            known = Some(s.points);
            sandwich_records = s
                .intervals
                .iter()
                .map(|iv| IntervalRecord {
                    estimand: iv.estimand,
                    se: iv.se,
                    lower: iv.lower,
                    upper: iv.upper,
                })
                .collect();
        }
    }

    let mut normal = Vec::new();
    let mut percentile = Vec::new();
    let mut failures = 0;
    if config.bootstrap_replicates > 0 {
        let estimands = bootstrap_estimands(&report);
        let propensity = PropensitySource::Refit {
            settings: config.fit.clone(),
            init: FitInit {
                alpha: Some(fitted.model.alpha.clone()),
                inverse_hessian: fitted.inverse_hessian.clone(),
            },
        };
        let boot = cluster_bootstrap(
            &ds,
            &estimands,
            |d, origin| replicate_estimates(d, origin, &e_hat, &propensity, &estimands, config.nu_guard),
            &BootstrapConfig {
                replicates: config.bootstrap_replicates,
                seed: config.seed ^ (replicate as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                level: config.level,
                threads: config.threads.map(|_| 1),
                ..BootstrapConfig::default()
            },
        )?;
        failures = boot.failures;
        for b in &boot.estimates {
            normal.push(IntervalRecord {
                estimand: b.estimand,
                se: b.se,
                lower: b.normal.0,
                upper: b.normal.1,
            });
            percentile.push(IntervalRecord {
                estimand: b.estimand,
                se: b.se,
                lower: b.percentile.0,
                upper: b.percentile.1,
            });
        }
    }

    Ok(ReplicateRecord {
        replicate,
        truths,
        n_recruited: ds.n(),
        naive: naive_difference(&ds),
        alpha_hat: fitted.model.alpha,
        nu_hat: report.nu,
        tau_r: report.tau_r,
        tau_a: report.tau_a,
        tau_ac: report.tau_ac,
        tau_c: report.tau_c,
        known,
        sandwich: sandwich_records,
        bootstrap_normal: normal,
        bootstrap_percentile: percentile,
        bootstrap_failures: failures,
    })
}

/// Estimator performance against per-replicate sample truths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimandSummary {
    /// `estimated`, `known` or `naive`.
    pub track: String,
    pub estimand: Estimand,
    pub replicates: usize,
    pub mean_estimate: f64,
    pub mean_truth: f64,
    pub mean_bias: f64,
    pub sd: f64,
    /// Monte Carlo standard error of `mean_bias`.
    pub mc_se: f64,
    pub rmse: f64,
    /// `(method, empirical coverage)` pairs.
    pub coverage: Vec<(String, f64)>,
}

impl EstimandSummary {
    pub fn coverage_of(&self, method: &str) -> Option<f64> {
        self.coverage.iter().find(|(m, _)| m == method).map(|(_, c)| *c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub scenario: String,
    pub clusters: usize,
    pub n_reps: usize,
    pub seed: u64,
    pub completed: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub mean_prevalences: [f64; 3],
    pub mean_truths: Vec<(Estimand, f64)>,
    pub mean_tau_o: f64,
    pub mean_nu_true: f64,
    pub alpha_true: Vec<f64>,
    pub alpha_bias: Vec<f64>,
    pub alpha_mean_abs_error: Vec<f64>,
    pub nu_bias: f64,
    pub nu_mean_abs_error: f64,
    pub estimands: Vec<EstimandSummary>,
}

impl MonteCarloSummary {
    pub fn find(&self, track: &str, estimand: Estimand) -> Option<&EstimandSummary> {
        self.estimands
            .iter()
            .find(|s| s.track == track && s.estimand == estimand)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// `(lower, upper, truth)` per replicate.
type Hits = Vec<(f64, f64, f64)>;

fn summarize_track(
    track: &str,
    estimand: Estimand,
    pairs: &[(f64, f64)],
    intervals: &[(&str, Hits)],
) -> Option<EstimandSummary> {
    if pairs.is_empty() {
        return None;
    }
    let est: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let bias: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let coverage = intervals
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(name, v)| {
            let hit = v.iter().filter(|(lo, hi, t)| lo <= t && t <= hi).count();
            (name.to_string(), hit as f64 / v.len() as f64)
        })
        .collect();
    Some(EstimandSummary {
        track: track.into(),
        estimand,
        replicates: pairs.len(),
        mean_estimate: mean(&est),
        mean_truth: mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
        mean_bias: mean(&bias),
        sd: sd(&est),
        mc_se: sd(&bias) / (bias.len() as f64).sqrt(),
        rmse: (bias.iter().map(|b| b * b).sum::<f64>() / bias.len() as f64).sqrt(),
        coverage,
    })
}

fn interval_hits(
    records: &[ReplicateRecord],
    estimand: Estimand,
    pick: fn(&ReplicateRecord) -> &[IntervalRecord],
) -> Hits {
    records
        .iter()
        .filter_map(|r| {
            let iv = pick(r).iter().find(|iv| iv.estimand == estimand)?;
            Some((iv.lower, iv.upper, r.truths.get(estimand)?))
        })
        .collect()
}

/// Aggregates replicate records into a summary.
pub fn summarize_study(
    scenario: &SimScenario,
    config: &StudyConfig,
    records: &[ReplicateRecord],
    failure_messages: Vec<String>,
) -> MonteCarloSummary {
    let failures = failure_messages.len();
    let count = records.len().max(1) as f64;
    let mut mean_prevalences = [0.0; 3];
    for r in records {
        for k in 0..3 {
            mean_prevalences[k] += r.truths.prevalences[k] / count;
        }
    }
    let truths_of = |e: Estimand| -> Vec<f64> { records.iter().filter_map(|r| r.truths.get(e)).collect() };
    let mean_truths = [Estimand::TauR, Estimand::TauA, Estimand::TauAc, Estimand::TauC]
        .into_iter()
        .filter_map(|e| {
            let v = truths_of(e);
            (!v.is_empty()).then(|| (e, mean(&v)))
        })
        .collect();

    let dim = scenario.alpha.len();
    let mut alpha_bias = vec![0.0; dim];
    let mut alpha_mae = vec![0.0; dim];
    for r in records {
        for k in 0..dim {
            let d = r.alpha_hat[k] - scenario.alpha[k];
            alpha_bias[k] += d / count;
            alpha_mae[k] += d.abs() / count;
        }
    }
    let nu_pairs: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.nu_hat, r.truths.nu?))).collect();
    let nu_diff: Vec<f64> = nu_pairs.iter().map(|(a, b)| a - b).collect();

    let mut estimands = Vec::new();
    for e in Estimand::ALL {
        let pairs: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| Some((r.estimate(e)?, r.truths.get(e)?)))
            .collect();
        let intervals = [
            ("bootstrap-normal", interval_hits(records, e, |r| &r.bootstrap_normal)),
            (
                "bootstrap-percentile",
                interval_hits(records, e, |r| &r.bootstrap_percentile),
            ),
        ];
        estimands.extend(summarize_track("estimated", e, &pairs, &intervals));
    }
    if config.known_sandwich {
        for e in SANDWICH_ESTIMANDS {
            let pairs: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r| Some((r.known_estimate(e)?, r.truths.get(e)?)))
                .collect();
            let intervals = [("sandwich", interval_hits(records, e, |r| &r.sandwich))];
            estimands.extend(summarize_track("known", e, &pairs, &intervals));
        }
    }
    for e in [Estimand::TauR, Estimand::TauA, Estimand::TauAc, Estimand::TauC] {
        let pairs: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| Some((r.naive, r.truths.get(e)?)))
            .collect();
        estimands.extend(summarize_track("naive", e, &pairs, &[]));
    }

    MonteCarloSummary {
        scenario: scenario.label.clone(),
        clusters: scenario.clusters,
        n_reps: config.n_reps,
        seed: config.seed,
        completed: records.len(),
        failures,
        failure_messages,
        mean_prevalences,
        mean_truths,
        mean_tau_o: mean(&records.iter().map(|r| r.truths.tau_o).collect::<Vec<_>>()),
        mean_nu_true: mean(&nu_pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
        alpha_true: scenario.alpha.to_vec(),
        alpha_bias,
        alpha_mean_abs_error: alpha_mae,
        nu_bias: mean(&nu_diff),
        nu_mean_abs_error: mean(&nu_diff.iter().map(|d| d.abs()).collect::<Vec<_>>()),
        estimands,
    }
}

/// Result of [`run_study`]: the summary and every successful replicate.
#[derive(Debug, Clone, Serialize)]
pub struct StudyOutput {
    pub summary: MonteCarloSummary,
    pub replicates: Vec<ReplicateRecord>,
}

/// Runs `config.n_reps` independent replicates of `scenario`. Replicates that
/// fail are counted and reported; the study fails only if none succeed.
pub fn run_study(scenario: &SimScenario, config: &StudyConfig) -> Result<StudyOutput> {
    if config.n_reps == 0 {
        return Err(Error::InvalidInput("a study needs at least one replicate".into()));
    }
    scenario.validate()?;
    let run = |r: usize| run_replicate(scenario, config, r);
    let results: Vec<Result<ReplicateRecord>> = match config.threads {
        Some(1) => (0..config.n_reps).map(run).collect(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(|| (0..config.n_reps).into_par_iter().map(run).collect()),
        None => (0..config.n_reps).into_par_iter().map(run).collect(),
    };
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failures.push(format!("replicate {r}: {e}"));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Generation(format!(
            "all {} replicates failed; first error: {}",
            config.n_reps, failures[0]
        )));
    }
    let summary = summarize_study(scenario, config, &records, failures);
    Ok(StudyOutput {
        summary,
        replicates: records,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per (track, estimand).
pub fn write_summary_csv<W: Write>(summary: &MonteCarloSummary, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "scenario",
        "track",
        "estimand",
        "replicates",
        "mean_estimate",
        "mean_truth",
        "mean_bias",
        "sd",
        "mc_se",
        "rmse",
        "coverage_sandwich",
        "coverage_bootstrap_normal",
        "coverage_bootstrap_percentile",
    ])
    .map_err(io_error)?;
    for s in &summary.estimands {
        wtr.write_record([
            summary.scenario.clone(),
            s.track.clone(),
            s.estimand.label().into(),
            s.replicates.to_string(),
            s.mean_estimate.to_string(),
            s.mean_truth.to_string(),
            s.mean_bias.to_string(),
            s.sd.to_string(),
            s.mc_se.to_string(),
            s.rmse.to_string(),
            fmt_opt(s.coverage_of("sandwich")),
            fmt_opt(s.coverage_of("bootstrap-normal")),
            fmt_opt(s.coverage_of("bootstrap-percentile")),
        ])
        .map_err(io_error)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row per replicate with truths and point estimates.
pub fn write_replicates_csv<W: Write>(records: &[ReplicateRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "replicate",
        "n_recruited",
        "prev_always",
        "prev_incentivized",
        "prev_never",
        "truth_tau_O",
        "truth_tau_R",
        "truth_tau_a",
        "truth_tau_ac",
        "truth_tau_c",
        "truth_nu",
        "naive",
        "tau_R",
        "tau_a",
        "tau_ac",
        "tau_c",
        "nu",
        "known_tau_a",
        "known_tau_c",
        "known_tau_R",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..6).map(|k| format!("alpha{k}")));
    wtr.write_record(&header).map_err(io_error)?;
    for r in records {
        let t = &r.truths;
        let known = |k: usize| fmt_opt(r.known.map(|v| v[k]).filter(|v| v.is_finite()));
        let mut row = vec![
            r.replicate.to_string(),
            r.n_recruited.to_string(),
            t.prevalences[0].to_string(),
            t.prevalences[1].to_string(),
            t.prevalences[2].to_string(),
            t.tau_o.to_string(),
            t.tau_r.to_string(),
            fmt_opt(t.tau_a),
            fmt_opt(t.tau_ac),
            fmt_opt(t.tau_c),
            fmt_opt(t.nu),
            r.naive.to_string(),
            r.tau_r.to_string(),
            r.tau_a.to_string(),
            r.tau_ac.to_string(),
            fmt_opt(r.tau_c),
            r.nu_hat.to_string(),
            known(0),
            known(1),
            known(2),
        ];
        row.extend(r.alpha_hat.iter().map(|a| a.to_string()));
        wtr.write_record(&row).map_err(io_error)?;
    }
    wtr.flush()?;
    Ok(())
}
