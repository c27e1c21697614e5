//! Uncertainty quantification.
//!
//! Two interval methods are registered by name:
//!
//! * `sandwich`: stacked per-cluster estimating equations for the twelve
//!   Hajek numerators and denominators, mapped to `(tau_a, tau_c, tau_R)`
//!   with the delta method. Propensities and `nu` are treated as known.
//! * `bootstrap`: resamples whole clusters within each arm (the number of
//!   treated and control clusters is held fixed), re-running the full
//!   pipeline on every replicate, optionally including the propensity fit.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::RecruitedDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    check_propensities, estimate_from_propensities, AlwaysOrIncentivized, AlwaysRecruited, Estimand, EstimateConfig,
    EstimateReport, IntervalEstimate, Recruited, WeightScheme,
};
use crate::wps::{fit_from, FitInit, FitSettings};

/// Two-sided standard normal critical value for `level`.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std_normal.inverse_cdf(0.5 + level / 2.0))
}

/// The three weight schemes in estimating-equation order.
const THETA_SCHEMES: [&dyn WeightScheme; 3] = [&AlwaysRecruited, &AlwaysOrIncentivized, &Recruited];

/// Hajek numerators and denominators per scheme, each divided by the total
/// recruited count: for every scheme `(sum w1 Z Y, sum w0 (1-Z) Y, sum w1 Z,
/// sum w0 (1-Z)) / n`, ordered always, always-or-incentivized, recruited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaHat(pub [f64; 12]);

/// Unnormalized contributions of one row to the twelve sums.
#[inline]
fn row_terms(z: bool, y: f64, e: f64) -> [f64; 12] {
    let mut t = [0.0; 12];
    for (s, scheme) in THETA_SCHEMES.iter().enumerate() {
        if z {
            let w = scheme.treated_weight(e);
            t[4 * s] = w * y;
            t[4 * s + 2] = w;
        } else {
            let w = scheme.control_weight(e);
            t[4 * s + 1] = w * y;
            t[4 * s + 3] = w;
        }
    }
    t
}

fn cluster_sums(dataset: &RecruitedDataset, e_values: &[f64]) -> Vec<[f64; 12]> {
    dataset
        .clusters()
        .iter()
        .map(|c| {
            let mut acc = [0.0; 12];
            for i in c.rows() {
                let t = row_terms(dataset.treatment()[i], dataset.outcomes()[i], e_values[i]);
                acc.iter_mut().zip(t).for_each(|(a, v)| *a += v);
            }
            acc
        })
        .collect()
}

impl ThetaHat {
    pub fn compute(dataset: &RecruitedDataset, e_values: &[f64]) -> Result<Self> {
        check_propensities(dataset, e_values)?;
        let mut theta = [0.0; 12];
        for c in cluster_sums(dataset, e_values) {
            theta.iter_mut().zip(c).for_each(|(a, v)| *a += v);
        }
        let n = dataset.n() as f64;
        theta.iter_mut().for_each(|v| *v /= n);
        let out = Self(theta);
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        for s in 0..3 {
            for k in [2, 3] {
                let v = self.0[4 * s + k];
                if !(v > 1e-300) || !v.is_finite() {
                    return Err(Error::NumericalDegeneracy(format!(
                        "weight total theta[{}] = {v:e} for the {} scheme",
                        4 * s + k + 1,
                        THETA_SCHEMES[s].name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn contrast(&self, s: usize) -> f64 {
        let t = &self.0[4 * s..4 * s + 4];
        t[0] / t[2] - t[1] / t[3]
    }

    /// `(tau_a, tau_c, tau_R)` with `tau_c` formed from the known `nu`.
    pub fn g(&self, nu: f64) -> [f64; 3] {
        let (z1, z2) = zetas(nu);
        let tau_a = self.contrast(0);
        [tau_a, z1 * self.contrast(1) + z2 * tau_a, self.contrast(2)]
    }

    /// `3 x 12` Jacobian of [`ThetaHat::g`].
    pub fn jacobian(&self, nu: f64) -> [[f64; 12]; 3] {
        let (z1, z2) = zetas(nu);
        let block = |s: usize, scale: f64| -> [f64; 4] {
            let t = &self.0[4 * s..4 * s + 4];
            [
                scale / t[2],
                -scale / t[3],
                -scale * t[0] / (t[2] * t[2]),
                scale * t[1] / (t[3] * t[3]),
            ]
        };
        let mut jac = [[0.0; 12]; 3];
        jac[0][..4].copy_from_slice(&block(0, 1.0));
        jac[1][..4].copy_from_slice(&block(0, z2));
        jac[1][4..8].copy_from_slice(&block(1, z1));
        jac[2][8..].copy_from_slice(&block(2, 1.0));
        jac
    }
}

/// `zeta1 = 1 / (1 - nu)`, `zeta2 = -nu / (1 - nu)`.
fn zetas(nu: f64) -> (f64, f64) {
    let z1 = 1.0 / (1.0 - nu);
    (z1, -nu * z1)
}

/// Per-cluster estimating-equation values `psi(D_j; theta_hat)`; they sum to
/// zero across clusters.
pub fn psi_contributions(dataset: &RecruitedDataset, e_values: &[f64]) -> Result<Vec<[f64; 12]>> {
    let theta = ThetaHat::compute(dataset, e_values)?;
    Ok(psi_at(dataset, e_values, &theta))
}

fn psi_at(dataset: &RecruitedDataset, e_values: &[f64], theta: &ThetaHat) -> Vec<[f64; 12]> {
    cluster_sums(dataset, e_values)
        .into_iter()
        .zip(dataset.clusters())
        .map(|(mut s, c)| {
            let n_j = c.len as f64;
            s.iter_mut().zip(theta.0).for_each(|(v, t)| *v -= t * n_j);
            s
        })
        .collect()
}

/// Order of the sandwich rows.
pub const SANDWICH_ESTIMANDS: [Estimand; 3] = [Estimand::TauA, Estimand::TauC, Estimand::TauR];

#[derive(Debug, Clone, Serialize)]
pub struct SandwichResult {
    /// Asymptotic covariance of `sqrt(J)` times `(tau_a, tau_c, tau_R)`.
    /// The `tau_c` row and column are zero when `tau_c_omitted`.
    pub sigma: [[f64; 3]; 3],
    pub points: [f64; 3],
    pub standard_errors: [Option<f64>; 3],
    pub intervals: Vec<IntervalEstimate>,
    pub tau_c_omitted: bool,
    pub level: f64,
}

/// Sandwich covariance `A^-1 V A^-T` with `A = mean(n_j) I`, mapped through
/// the delta method. `nu` is taken as known.
pub fn sandwich(
    dataset: &RecruitedDataset,
    e_values: &[f64],
    nu: f64,
    config: &SandwichConfig,
) -> Result<SandwichResult> {
    let theta = ThetaHat::compute(dataset, e_values)?;
    let psi = psi_at(dataset, e_values, &theta);
    let j = dataset.n_clusters() as f64;
    let mean_size = dataset.n() as f64 / j;

    let mut v = [[0.0; 12]; 12];
    for p in &psi {
        for a in 0..12 {
            for b in a..12 {
                v[a][b] += p[a] * p[b];
            }
        }
    }
    let scale = 1.0 / (j * mean_size * mean_size);
    for a in 0..12 {
        for b in a..12 {
            v[a][b] *= scale;
            v[b][a] = v[a][b];
        }
    }

    let tau_c_omitted = !(nu < 1.0 - config.nu_guard) || nu < 0.0;
    let nu_for_g = if tau_c_omitted { 0.0 } else { nu };
    let mut jac = theta.jacobian(nu_for_g);
    if tau_c_omitted {
        jac[1] = [0.0; 12];
    }
    let mut points = theta.g(nu_for_g);
    if tau_c_omitted {
        points[1] = f64::NAN;
    }

    let mut sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in r..3 {
            let mut acc = 0.0;
            for a in 0..12 {
                if jac[r][a] == 0.0 {
                    continue;
                }
                for b in 0..12 {
                    acc += jac[r][a] * v[a][b] * jac[c][b];
                }
            }
            sigma[r][c] = acc;
            sigma[c][r] = acc;
        }
    }

    let z = normal_critical_value(config.level)?;
    let mut standard_errors = [None; 3];
    let mut intervals = Vec::new();
    for (k, est) in SANDWICH_ESTIMANDS.iter().enumerate() {
        if k == 1 && tau_c_omitted {
            continue;
        }
        let se = (sigma[k][k].max(0.0) / j).sqrt();
        standard_errors[k] = Some(se);
        intervals.push(IntervalEstimate {
            estimand: *est,
            method: "sandwich".into(),
            se,
            lower: points[k] - z * se,
            upper: points[k] + z * se,
            level: config.level,
        });
    }
    Ok(SandwichResult {
        sigma,
        points,
        standard_errors,
        intervals,
        tau_c_omitted,
        level: config.level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichConfig {
    pub level: f64,
    pub nu_guard: f64,
}

impl Default for SandwichConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            nu_guard: crate::estimators::DEFAULT_NU_GUARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    /// Worker threads; `None` runs in the ambient rayon pool.
    pub threads: Option<usize>,
    /// Largest tolerated share of failed replicates.
    pub max_failure_rate: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 300,
            seed: 0,
            level: 0.95,
            threads: None,
            max_failure_rate: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapEstimate {
    pub estimand: Estimand,
    pub point: f64,
    pub mean: f64,
    pub se: f64,
    pub normal: (f64, f64),
    pub percentile: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    pub failures: usize,
    pub estimates: Vec<BootstrapEstimate>,
    /// Successful replicate values, in replicate order.
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

impl BootstrapResult {
    pub fn intervals(&self) -> Vec<IntervalEstimate> {
        self.estimates
            .iter()
            .flat_map(|b| {
                [
                    IntervalEstimate {
                        estimand: b.estimand,
                        method: "bootstrap-normal".into(),
                        se: b.se,
                        lower: b.normal.0,
                        upper: b.normal.1,
                        level: self.level,
                    },
                    IntervalEstimate {
                        estimand: b.estimand,
                        method: "bootstrap-percentile".into(),
                        se: b.se,
                        lower: b.percentile.0,
                        upper: b.percentile.1,
                        level: self.level,
                    },
                ]
            })
            .collect()
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cluster indices for one replicate: the treated stratum and the control
/// stratum are each resampled with replacement at their original size.
pub fn stratified_draw(dataset: &RecruitedDataset, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let (treated, control): (Vec<usize>, Vec<usize>) =
        (0..dataset.n_clusters()).partition(|&j| dataset.clusters()[j].treated);
    let mut out = Vec::with_capacity(dataset.n_clusters());
    for stratum in [&treated, &control] {
        for _ in 0..stratum.len() {
            out.push(*stratum.choose(&mut rng).expect("non-empty arm"));
        }
    }
    out
}

/// Stratified cluster bootstrap of an arbitrary estimation pipeline.
///
/// `pipeline` receives a dataset and, for each of its rows, the index of the
/// source row in the original dataset; it returns one value per entry of
/// `estimands`. The original data are passed with the identity map to obtain
/// the point estimates.
pub fn cluster_bootstrap<F>(
    dataset: &RecruitedDataset,
    estimands: &[Estimand],
    pipeline: F,
    config: &BootstrapConfig,
) -> Result<BootstrapResult>
where
    F: Fn(&RecruitedDataset, &[usize]) -> Result<Vec<f64>> + Sync,
{
    if config.replicates < 2 {
        return Err(Error::InvalidInput("bootstrap needs at least 2 replicates".into()));
    }
    let z = normal_critical_value(config.level)?;
    let identity: Vec<usize> = (0..dataset.n()).collect();
    let points = pipeline(dataset, &identity)?;
    if points.len() != estimands.len() {
        return Err(Error::Dimension {
            expected: estimands.len(),
            got: points.len(),
        });
    }

    let run = |b: usize| -> Option<Vec<f64>> {
        let idx = stratified_draw(dataset, config.seed, b as u64);
        let (rs, origin) = dataset.resample_clusters(&idx).ok()?;
        match pipeline(&rs, &origin) {
            Ok(v) if v.len() == estimands.len() && v.iter().all(|x| x.is_finite()) => Some(v),
            _ => None,
        }
    };
    let results: Vec<Option<Vec<f64>>> = match config.threads {
        Some(1) => (0..config.replicates).map(run).collect(),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(|| (0..config.replicates).into_par_iter().map(run).collect()),
        None => (0..config.replicates).into_par_iter().map(run).collect(),
    };

    let draws: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let failures = config.replicates - draws.len();
    if failures as f64 > config.max_failure_rate * config.replicates as f64 || draws.len() < 2 {
        return Err(Error::BootstrapUnreliable {
            failed: failures,
            total: config.replicates,
        });
    }
    if failures > 0 {
        log::warn!(
            "{failures} of {} bootstrap replicates failed and were excluded",
            config.replicates
        );
    }

    let alpha = 1.0 - config.level;
    let estimates = estimands
        .iter()
        .enumerate()
        .map(|(k, &estimand)| {
            let mut vals: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
            vals.sort_by(f64::total_cmp);
            BootstrapEstimate {
                estimand,
                point: points[k],
                mean,
                se,
                normal: (points[k] - z * se, points[k] + z * se),
                percentile: (quantile(&vals, alpha / 2.0), quantile(&vals, 1.0 - alpha / 2.0)),
            }
        })
        .collect();

    Ok(BootstrapResult {
        replicates: config.replicates,
        seed: config.seed,
        level: config.level,
        failures,
        estimates,
        draws,
    })
}

/// Where bootstrap replicates get their propensities from.
#[derive(Debug, Clone)]
pub enum PropensitySource {
    /// Reuse the original per-row propensities.
    Fixed,
    /// Re-fit the working propensity model on every replicate.
    Refit { settings: FitSettings, init: FitInit },
}

/// Inputs shared by every interval method.
#[derive(Debug, Clone)]
pub struct InferenceContext<'a> {
    pub dataset: &'a RecruitedDataset,
    pub e_values: &'a [f64],
    pub report: &'a EstimateReport,
    pub propensity: PropensitySource,
    pub level: f64,
    pub nu_guard: f64,
}

pub trait IntervalMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn intervals(&self, ctx: &InferenceContext<'_>) -> Result<Vec<IntervalEstimate>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SandwichMethod;

impl IntervalMethod for SandwichMethod {
    fn name(&self) -> &'static str {
        "sandwich"
    }

    fn intervals(&self, ctx: &InferenceContext<'_>) -> Result<Vec<IntervalEstimate>> {
        let config = SandwichConfig {
            level: ctx.level,
            nu_guard: ctx.nu_guard,
        };
        Ok(sandwich(ctx.dataset, ctx.e_values, ctx.report.nu, &config)?.intervals)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BootstrapMethod {
    pub config: BootstrapConfig,
}

/// Estimands re-estimated on every replicate: `tau_c` only when the point
/// estimate has it.
pub fn bootstrap_estimands(report: &EstimateReport) -> Vec<Estimand> {
    Estimand::ALL
        .into_iter()
        .filter(|e| report.point(*e).is_some())
        .collect()
}

/// The full estimation pipeline for one (re)sampled dataset.
pub fn replicate_estimates(
    dataset: &RecruitedDataset,
    origin: &[usize],
    original_e: &[f64],
    propensity: &PropensitySource,
    estimands: &[Estimand],
    nu_guard: f64,
) -> Result<Vec<f64>> {
    let e: Vec<f64> = match propensity {
        PropensitySource::Fixed => origin.iter().map(|&i| original_e[i]).collect(),
        PropensitySource::Refit { settings, init } => fit_from(dataset, init, settings)?.model.propensities(dataset)?,
    };
    let report = estimate_from_propensities(dataset, &e, &EstimateConfig { nu_guard })?;
    estimands
        .iter()
        .map(|&est| {
            report.point(est).ok_or(Error::NoIncentivized {
                nu: report.nu,
                guard: nu_guard,
            })
        })
        .collect()
}

impl IntervalMethod for BootstrapMethod {
    fn name(&self) -> &'static str {
        "bootstrap"
    }

    fn intervals(&self, ctx: &InferenceContext<'_>) -> Result<Vec<IntervalEstimate>> {
        let estimands = bootstrap_estimands(ctx.report);
        let config = BootstrapConfig {
            level: ctx.level,
            ..self.config.clone()
        };
        let result = cluster_bootstrap(
            ctx.dataset,
            &estimands,
            |ds, origin| replicate_estimates(ds, origin, ctx.e_values, &ctx.propensity, &estimands, ctx.nu_guard),
            &config,
        )?;
        Ok(result.intervals())
    }
}

/// Names accepted by [`interval_method`].
pub const INTERVAL_METHODS: &[&str] = &["sandwich", "bootstrap"];

pub fn interval_method(name: &str, bootstrap: &BootstrapConfig) -> Option<Box<dyn IntervalMethod>> {
    match name {
        "sandwich" => Some(Box::new(SandwichMethod)),
        "bootstrap" => Some(Box::new(BootstrapMethod {
            config: bootstrap.clone(),
        })),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetBuilder;
    use crate::estimators::hajek;
    use rand::Rng;

    fn toy() -> RecruitedDataset {
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        b.begin_cluster("A", true);
        b.push_row(&[0.5], 1.0).unwrap();
        b.push_row(&[1.5], 3.0).unwrap();
        b.begin_cluster("B", false);
        b.push_row(&[2.0], 0.0).unwrap();
        b.push_row(&[-1.0], 2.0).unwrap();
        b.finish(0.5).unwrap()
    }

    fn random(seed: u64, clusters: usize) -> (RecruitedDataset, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        let mut e = Vec::new();
        for j in 0..clusters {
            b.begin_cluster(format!("{j}"), j % 3 != 0);
            for _ in 0..rng.random_range(1..8) {
                b.push_row(&[rng.random_range(-1.0..1.0)], rng.random_range(-2.0..4.0))
                    .unwrap();
                e.push(rng.random_range(0.2..0.8));
            }
        }
        (b.finish(0.5).unwrap(), e)
    }

    #[test]
    fn toy_psi_matches_hand_computation() {
        // e = (0.5, 0.8, 0.25, 0.6), n = 4
        let ds = toy();
        let e = [0.5, 0.8, 0.25, 0.6];
        let psi = psi_contributions(&ds, &e).unwrap();
        // Cluster A (treated, rows 0-1): always weights w1 = (1-e)/e = (1, 0.25)
        //   sums: wy = 1.75, w = 1.25; control parts 0.
        // Cluster B (control, rows 2-3): always w0 = 1 -> wy = 2, w = 2.
        // theta_a = (1.75, 2, 1.25, 2) / 4; psi_A = sums_A - 2 theta.
        let theta_a = [1.75 / 4.0, 2.0 / 4.0, 1.25 / 4.0, 2.0 / 4.0];
        let a_sums = [1.75, 0.0, 1.25, 0.0];
        let b_sums = [0.0, 2.0, 0.0, 2.0];
        for k in 0..4 {
            assert!((psi[0][k] - (a_sums[k] - 2.0 * theta_a[k])).abs() < 1e-12);
            assert!((psi[1][k] - (b_sums[k] - 2.0 * theta_a[k])).abs() < 1e-12);
        }
        // always-or-incentivized: w1 = 1, w0 = e/(1-e) = (1/3, 1.5)
        let ac_a = [4.0, 0.0, 2.0, 0.0];
        let ac_b = [0.0, 3.0, 0.0, 1.0 / 3.0 + 1.5];
        // recruited: w1 = 1/e = (2, 1.25), w0 = 1/(1-e) = (4/3, 2.5)
        let r_a = [2.0 + 3.75, 0.0, 3.25, 0.0];
        let r_b = [0.0, 5.0, 0.0, 4.0 / 3.0 + 2.5];
        for (s, (ca, cb)) in [(1, (ac_a, ac_b)), (2, (r_a, r_b))] {
            for k in 0..4 {
                let theta = (ca[k] + cb[k]) / 4.0;
                assert!((psi[0][4 * s + k] - (ca[k] - 2.0 * theta)).abs() < 1e-12);
                assert!((psi[1][4 * s + k] - (cb[k] - 2.0 * theta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psi_sums_to_zero() {
        for seed in 0..20 {
            let (ds, e) = random(seed, 30);
            let psi = psi_contributions(&ds, &e).unwrap();
            for k in 0..12 {
                let s: f64 = psi.iter().map(|p| p[k]).sum();
                assert!(s.abs() <= 1e-8, "component {k}: {s}");
            }
        }
    }

    #[test]
    fn clusters_identical_within_arm_give_zero_standard_errors() {
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        for j in 0..6 {
            b.begin_cluster(format!("{j}"), j % 2 == 0);
            b.push_row(&[0.0], 1.0 + (j % 2) as f64).unwrap();
            b.push_row(&[1.0], 2.0).unwrap();
        }
        let ds = b.finish(0.5).unwrap();
        let e: Vec<f64> = (0..ds.n()).map(|i| if i % 2 == 0 { 0.6 } else { 0.3 }).collect();
        let psi = psi_contributions(&ds, &e).unwrap();
        assert!(psi.iter().step_by(2).all(|p| *p == psi[0]));
        let s = sandwich(&ds, &e, 0.3, &SandwichConfig::default()).unwrap();
        for se in s.standard_errors.iter().flatten() {
            assert!(se.abs() < 1e-7, "{se}");
        }
    }

    #[test]
    fn g_reproduces_hajek_estimates() {
        for seed in 0..20 {
            let (ds, e) = random(seed, 25);
            let theta = ThetaHat::compute(&ds, &e).unwrap();
            let nu = 0.37;
            let g = theta.g(nu);
            let ta = hajek(&ds, &e, &AlwaysRecruited).unwrap();
            let tac = hajek(&ds, &e, &AlwaysOrIncentivized).unwrap();
            let tr = hajek(&ds, &e, &Recruited).unwrap();
            let tc = crate::estimators::estimate_tau_c(ta, tac, nu, 0.02).unwrap();
            assert!((g[0] - ta).abs() <= 1e-12);
            assert!((g[1] - tc).abs() <= 1e-12);
            assert!((g[2] - tr).abs() <= 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (ds, e) = random(7, 30);
        let theta = ThetaHat::compute(&ds, &e).unwrap();
        let nu = 0.42;
        let jac = theta.jacobian(nu);
        for k in 0..12 {
            let h = 1e-6 * theta.0[k].abs().max(1e-3);
            let mut up = theta;
            up.0[k] += h;
            let mut dn = theta;
            dn.0[k] -= h;
            let (gu, gd) = (up.g(nu), dn.g(nu));
            for r in 0..3 {
                let fd = (gu[r] - gd[r]) / (2.0 * h);
                let rel = (fd - jac[r][k]).abs() / jac[r][k].abs().max(1e-8);
                assert!(
                    rel <= 1e-6 || (fd - jac[r][k]).abs() < 1e-9,
                    "row {r} col {k}: {fd} vs {}",
                    jac[r][k]
                );
            }
        }
    }

    #[test]
    fn nu_zero_reduces_tau_c_row_to_tau_ac() {
        let (ds, e) = random(3, 20);
        let theta = ThetaHat::compute(&ds, &e).unwrap();
        let jac = theta.jacobian(0.0);
        assert!(jac[1][..4].iter().all(|v| *v == 0.0));
        let g = theta.g(0.0);
        assert!((g[1] - hajek(&ds, &e, &AlwaysOrIncentivized).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sandwich_is_symmetric_psd_and_order_invariant() {
        let (ds, e) = random(11, 40);
        let s = sandwich(&ds, &e, 0.5, &SandwichConfig::default()).unwrap();
        for r in 0..3 {
            assert!(s.sigma[r][r] >= 0.0);
            for c in 0..3 {
                assert!((s.sigma[r][c] - s.sigma[c][r]).abs() <= 1e-10);
            }
        }
        let rev: Vec<usize> = (0..ds.n_clusters()).rev().collect();
        let (rds, origin) = ds.resample_clusters(&rev).unwrap();
        let re: Vec<f64> = origin.iter().map(|&i| e[i]).collect();
        let s2 = sandwich(&rds, &re, 0.5, &SandwichConfig::default()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((s.sigma[r][c] - s2.sigma[r][c]).abs() <= 1e-10 * (1.0 + s.sigma[r][c].abs()));
            }
        }
    }

    #[test]
    fn sandwich_omits_tau_c_near_nu_one() {
        let (ds, e) = random(2, 20);
        let s = sandwich(&ds, &e, 0.995, &SandwichConfig::default()).unwrap();
        assert!(s.tau_c_omitted && s.standard_errors[1].is_none());
        assert_eq!(s.intervals.len(), 2);
    }

    fn fixed_pipeline<'a>(e: &'a [f64]) -> impl Fn(&RecruitedDataset, &[usize]) -> Result<Vec<f64>> + Sync + 'a {
        move |ds, origin| {
            let ee: Vec<f64> = origin.iter().map(|&i| e[i]).collect();
            Ok(vec![hajek(ds, &ee, &AlwaysRecruited)?, hajek(ds, &ee, &Recruited)?])
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_thread_count_invariant() {
        let (ds, e) = random(5, 30);
        let ests = [Estimand::TauA, Estimand::TauR];
        let cfg = BootstrapConfig {
            replicates: 120,
            seed: 42,
            threads: Some(1),
            ..BootstrapConfig::default()
        };
        let a = cluster_bootstrap(&ds, &ests, fixed_pipeline(&e), &cfg).unwrap();
        let b = cluster_bootstrap(&ds, &ests, fixed_pipeline(&e), &cfg).unwrap();
        let c = cluster_bootstrap(
            &ds,
            &ests,
            fixed_pipeline(&e),
            &BootstrapConfig {
                threads: Some(3),
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.draws, c.draws);
        assert_eq!(a.failures, 0);
        let d = cluster_bootstrap(&ds, &ests, fixed_pipeline(&e), &BootstrapConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.draws, d.draws);
    }

    #[test]
    fn stratified_draw_preserves_arm_sizes() {
        let (ds, _) = random(9, 31);
        for b in 0..20 {
            let idx = stratified_draw(&ds, 1, b);
            let treated = idx.iter().filter(|&&j| ds.clusters()[j].treated).count();
            assert_eq!(treated, ds.n_treated_clusters());
            assert_eq!(idx.len(), ds.n_clusters());
        }
    }

    #[test]
    fn bootstrap_of_identical_clusters_has_zero_se() {
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        for j in 0..10 {
            b.begin_cluster(format!("{j}"), j < 5);
            b.push_row(&[0.0], 1.0 + if j < 5 { 1.0 } else { 0.0 }).unwrap();
            b.push_row(&[1.0], 0.5).unwrap();
        }
        let ds = b.finish(0.5).unwrap();
        let e = vec![0.6; ds.n()];
        let r = cluster_bootstrap(
            &ds,
            &[Estimand::TauA, Estimand::TauR],
            fixed_pipeline(&e),
            &BootstrapConfig {
                replicates: 50,
                seed: 1,
                ..BootstrapConfig::default()
            },
        )
        .unwrap();
        for est in &r.estimates {
            assert!(est.se.abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_mean_approaches_point_estimate() {
        let (ds, e) = random(21, 40);
        let ests = [Estimand::TauA, Estimand::TauR];
        let gap = |b: usize| {
            let r = cluster_bootstrap(
                &ds,
                &ests,
                fixed_pipeline(&e),
                &BootstrapConfig {
                    replicates: b,
                    seed: 8,
                    ..BootstrapConfig::default()
                },
            )
            .unwrap();
            (r.estimates[1].mean - r.estimates[1].point).abs() / r.estimates[1].se
        };
        assert!(gap(4000) < gap(20).max(0.05));
        assert!(gap(4000) < 0.1);
    }

    #[test]
    fn too_many_failures_are_reported() {
        let (ds, _) = random(4, 20);
        let is_identity = |origin: &[usize]| origin.iter().enumerate().all(|(i, &o)| i == o);
        let err = cluster_bootstrap(
            &ds,
            &[Estimand::TauA],
            |_, origin| {
                if is_identity(origin) {
                    Ok(vec![1.0])
                } else {
                    Err(Error::Generation("x".into()))
                }
            },
            &BootstrapConfig {
                replicates: 100,
                ..BootstrapConfig::default()
            },
        );
        assert!(matches!(
            err,
            Err(Error::BootstrapUnreliable {
                failed: 100,
                total: 100
            })
        ));
    }

    #[test]
    fn critical_value_for_95_percent() {
        assert!((normal_critical_value(0.95).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(normal_critical_value(1.0).is_err());
    }

    #[test]
    fn registry_builds_methods() {
        for name in INTERVAL_METHODS {
            assert_eq!(
                interval_method(name, &BootstrapConfig::default()).unwrap().name(),
                *name
            );
        }
        assert!(interval_method("jackknife", &BootstrapConfig::default()).is_none());
    }
}
