//! Hajek weighting estimators for the recruited population, the
//! always-recruited stratum and the union of always- and
//! incentivized-recruited strata, plus the derived incentivized-stratum
//! effect and weighted covariate profiles.

use std::fmt;

use serde::Serialize;

use crate::data::RecruitedDataset;
use crate::error::{Error, Result};
use crate::wps::WpsModel;

/// Target quantities reported by the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Estimand {
    /// Effect on the recruited population.
    #[serde(rename = "tau_R")]
    TauR,
    /// Effect on the always-recruited stratum.
    #[serde(rename = "tau_a")]
    TauA,
    /// Effect on always- or incentivized-recruited individuals.
    #[serde(rename = "tau_ac")]
    TauAc,
    /// Effect on the incentivized-recruited stratum.
    #[serde(rename = "tau_c")]
    TauC,
    /// Share of always-recruited among always- and incentivized-recruited.
    #[serde(rename = "nu")]
    Nu,
}

impl Estimand {
    pub const ALL: [Estimand; 5] = [
        Estimand::TauR,
        Estimand::TauA,
        Estimand::TauAc,
        Estimand::TauC,
        Estimand::Nu,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Estimand::TauR => "tau_R",
            Estimand::TauA => "tau_a",
            Estimand::TauAc => "tau_ac",
            Estimand::TauC => "tau_c",
            Estimand::Nu => "nu",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.label() == s)
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A pair of arm weights `(w0(e), w1(e))` defining one Hajek estimator.
pub trait WeightScheme: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn estimand(&self) -> Estimand;

    fn control_weight(&self, e: f64) -> f64;

    fn treated_weight(&self, e: f64) -> f64;
}

/// Another scheme with each arm's weights multiplied by a positive constant;
/// Hajek estimates do not change.
#[derive(Debug, Clone, Copy)]
pub struct Scaled<'a> {
    pub inner: &'a dyn WeightScheme,
    pub treated: f64,
    pub control: f64,
}

impl WeightScheme for Scaled<'_> {
    fn name(&self) -> &'static str {
        "scaled"
    }

    fn estimand(&self) -> Estimand {
        self.inner.estimand()
    }

    fn control_weight(&self, e: f64) -> f64 {
        self.control * self.inner.control_weight(e)
    }

    fn treated_weight(&self, e: f64) -> f64 {
        self.treated * self.inner.treated_weight(e)
    }
}

/// `w0 = 1/(1-e)`, `w1 = 1/e`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Recruited;

/// `w0 = 1`, `w1 = (1-e)/e`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysRecruited;

/// `w0 = e/(1-e)`, `w1 = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysOrIncentivized;

impl WeightScheme for Recruited {
    fn name(&self) -> &'static str {
        "recruited"
    }
    fn estimand(&self) -> Estimand {
        Estimand::TauR
    }
    fn control_weight(&self, e: f64) -> f64 {
        1.0 / (1.0 - e)
    }
    fn treated_weight(&self, e: f64) -> f64 {
        1.0 / e
    }
}

impl WeightScheme for AlwaysRecruited {
    fn name(&self) -> &'static str {
        "always-recruited"
    }
    fn estimand(&self) -> Estimand {
        Estimand::TauA
    }
    fn control_weight(&self, _e: f64) -> f64 {
        1.0
    }
    fn treated_weight(&self, e: f64) -> f64 {
        (1.0 - e) / e
    }
}

impl WeightScheme for AlwaysOrIncentivized {
    fn name(&self) -> &'static str {
        "always-or-incentivized"
    }
    fn estimand(&self) -> Estimand {
        Estimand::TauAc
    }
    fn control_weight(&self, e: f64) -> f64 {
        e / (1.0 - e)
    }
    fn treated_weight(&self, _e: f64) -> f64 {
        1.0
    }
}

/// Every registered scheme, in reporting order.
pub static SCHEMES: [&dyn WeightScheme; 3] = [&Recruited, &AlwaysRecruited, &AlwaysOrIncentivized];

pub fn scheme(name: &str) -> Option<&'static dyn WeightScheme> {
    SCHEMES.iter().copied().find(|s| s.name() == name)
}

pub fn scheme_for(estimand: Estimand) -> Option<&'static dyn WeightScheme> {
    SCHEMES.iter().copied().find(|s| s.estimand() == estimand)
}

pub(crate) fn check_propensities(dataset: &RecruitedDataset, e_values: &[f64]) -> Result<()> {
    if e_values.len() != dataset.n() {
        return Err(Error::Dimension {
            expected: dataset.n(),
            got: e_values.len(),
        });
    }
    if let Some(i) = e_values.iter().position(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::InvalidInput(format!(
            "propensity at row {i} is {} (must lie strictly inside (0, 1))",
            e_values[i]
        )));
    }
    Ok(())
}

/// Per-arm weighted sums for one scheme.
#[derive(Debug, Clone, Copy, Default)]
struct ArmSums {
    treated_wy: f64,
    treated_w: f64,
    treated_w2: f64,
    control_wy: f64,
    control_w: f64,
    control_w2: f64,
}

impl ArmSums {
    fn collect(dataset: &RecruitedDataset, e_values: &[f64], scheme: &dyn WeightScheme) -> Self {
        let mut s = Self::default();
        for ((&z, &y), &e) in dataset.treatment().iter().zip(dataset.outcomes()).zip(e_values) {
            if z {
                let w = scheme.treated_weight(e);
                s.treated_wy += w * y;
                s.treated_w += w;
                s.treated_w2 += w * w;
            } else {
                let w = scheme.control_weight(e);
                s.control_wy += w * y;
                s.control_w += w;
                s.control_w2 += w * w;
            }
        }
        s
    }

    fn difference(&self, scheme: &dyn WeightScheme) -> Result<f64> {
        if !(self.treated_w > 0.0) || !(self.control_w > 0.0) {
            return Err(Error::DegenerateArm(format!(
                "an arm has zero total weight under the {} scheme",
                scheme.name()
            )));
        }
        Ok(self.treated_wy / self.treated_w - self.control_wy / self.control_w)
    }
}

/// Hajek estimate `sum w1 Z Y / sum w1 Z - sum w0 (1-Z) Y / sum w0 (1-Z)`.
pub fn hajek(dataset: &RecruitedDataset, e_values: &[f64], scheme: &dyn WeightScheme) -> Result<f64> {
    check_propensities(dataset, e_values)?;
    ArmSums::collect(dataset, e_values, scheme).difference(scheme)
}

/// Unweighted difference of arm means among the recruited.
pub fn naive_difference(dataset: &RecruitedDataset) -> f64 {
    let (mut ts, mut tn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for (&z, &y) in dataset.treatment().iter().zip(dataset.outcomes()) {
        if z {
            ts += y;
            tn += 1;
        } else {
            cs += y;
            cn += 1;
        }
    }
    ts / tn as f64 - cs / cn as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NuEstimate {
    /// `pi (1 - p) / ((1 - pi) p)` with `p` the recruited treated share.
    pub raw: f64,
    /// `min(raw, 1)`.
    pub nu: f64,
    pub clipped: bool,
}

pub fn estimate_nu(dataset: &RecruitedDataset) -> Result<NuEstimate> {
    let n = dataset.n();
    let treated = dataset.n_treated();
    if n == 0 || treated == 0 || treated == n {
        return Err(Error::DegenerateArm(format!(
            "recruited treated share is {treated}/{n}"
        )));
    }
    let p = treated as f64 / n as f64;
    let pi = dataset.design_treatment_prob();
    let raw = pi * (1.0 - p) / ((1.0 - pi) * p);
    Ok(NuEstimate {
        raw,
        nu: raw.min(1.0),
        clipped: raw > 1.0,
    })
}

/// Default guard on `1 - nu` for the incentivized-stratum effect.
pub const DEFAULT_NU_GUARD: f64 = 0.02;

/// `(tau_ac - nu tau_a) / (1 - nu)`, defined for `nu` in `[0, 1 - guard)`.
pub fn estimate_tau_c(tau_a: f64, tau_ac: f64, nu: f64, guard: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&nu) || nu.is_nan() {
        if nu >= 1.0 {
            return Err(Error::NoIncentivized { nu, guard });
        }
        return Err(Error::InvalidInput(format!("nu must lie in [0, 1), got {nu}")));
    }
    if nu >= 1.0 - guard {
        return Err(Error::NoIncentivized { nu, guard });
    }
    Ok((tau_ac - nu * tau_a) / (1.0 - nu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectiveSize {
    pub scheme: &'static str,
    pub treated: f64,
    pub control: f64,
}

/// A standard error and interval attached to a point estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalEstimate {
    pub estimand: Estimand,
    pub method: String,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateConfig {
    pub nu_guard: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            nu_guard: DEFAULT_NU_GUARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub n_clusters: usize,
    pub n_treated_clusters: usize,
    pub n_recruited: usize,
    pub n_recruited_treated: usize,
    pub design_treatment_prob: f64,
    pub naive_difference: f64,
    pub tau_r: f64,
    pub tau_a: f64,
    pub tau_ac: f64,
    /// `None` when `nu` is within the guard of 1.
    pub tau_c: Option<f64>,
    pub nu_raw: f64,
    pub nu: f64,
    pub nu_clipped: bool,
    pub effective_sizes: Vec<EffectiveSize>,
    pub intervals: Vec<IntervalEstimate>,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn point(&self, estimand: Estimand) -> Option<f64> {
        match estimand {
            Estimand::TauR => Some(self.tau_r),
            Estimand::TauA => Some(self.tau_a),
            Estimand::TauAc => Some(self.tau_ac),
            Estimand::TauC => self.tau_c,
            Estimand::Nu => Some(self.nu),
        }
    }
}

/// All point estimates using the fitted model's propensities.
pub fn estimate_all(dataset: &RecruitedDataset, model: &WpsModel) -> Result<EstimateReport> {
    let e = model.propensities(dataset)?;
    estimate_from_propensities(dataset, &e, &EstimateConfig::default())
}

pub fn estimate_from_propensities(
    dataset: &RecruitedDataset,
    e_values: &[f64],
    config: &EstimateConfig,
) -> Result<EstimateReport> {
    check_propensities(dataset, e_values)?;
    let mut effective_sizes = Vec::with_capacity(SCHEMES.len());
    let mut points = [0.0; 3];
    for (slot, scheme) in points.iter_mut().zip(SCHEMES) {
        let sums = ArmSums::collect(dataset, e_values, scheme);
        *slot = sums.difference(scheme)?;
        effective_sizes.push(EffectiveSize {
            scheme: scheme.name(),
            treated: sums.treated_w.powi(2) / sums.treated_w2,
            control: sums.control_w.powi(2) / sums.control_w2,
        });
    }
    let [tau_r, tau_a, tau_ac] = points;
    let nu = estimate_nu(dataset)?;
    let mut warnings = Vec::new();
    if nu.clipped {
        warnings.push(format!("nu estimate {:.6} exceeds 1 and was clipped", nu.raw));
        log::warn!("nu estimate {:.6} exceeds 1 and was clipped", nu.raw);
    }
    let tau_c = match estimate_tau_c(tau_a, tau_ac, nu.nu, config.nu_guard) {
        Ok(v) => Some(v),
        Err(Error::NoIncentivized { .. }) => {
            warnings.push(format!(
                "tau_c unavailable: nu = {:.6} is within {} of 1",
                nu.nu, config.nu_guard
            ));
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EstimateReport {
        n_clusters: dataset.n_clusters(),
        n_treated_clusters: dataset.n_treated_clusters(),
        n_recruited: dataset.n(),
        n_recruited_treated: dataset.n_treated(),
        design_treatment_prob: dataset.design_treatment_prob(),
        naive_difference: naive_difference(dataset),
        tau_r,
        tau_a,
        tau_ac,
        tau_c,
        nu_raw: nu.raw,
        nu: nu.nu,
        nu_clipped: nu.clipped,
        effective_sizes,
        intervals: Vec::new(),
        warnings,
    })
}

/// Weighted means and standard deviations of the covariates in one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupProfile {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrataProfile {
    pub covariate_names: Vec<String>,
    pub recruited: GroupProfile,
    pub always: GroupProfile,
    pub always_or_incentivized: GroupProfile,
    pub incentivized: GroupProfile,
}

/// First and second weighted moments of the covariates, pooling both arms
/// with the scheme's arm weights.
fn weighted_moments(
    dataset: &RecruitedDataset,
    e_values: &[f64],
    scheme: &dyn WeightScheme,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = dataset.covariate_dim();
    let (mut m1, mut m2) = (vec![0.0; d], vec![0.0; d]);
    let (mut wt, mut wc) = (0.0, 0.0);
    for (i, (&z, &e)) in dataset.treatment().iter().zip(e_values).enumerate() {
        let w = if z {
            let w = scheme.treated_weight(e);
            wt += w;
            w
        } else {
            let w = scheme.control_weight(e);
            wc += w;
            w
        };
        for (k, &x) in dataset.row(i).iter().enumerate() {
            m1[k] += w * x;
            m2[k] += w * x * x;
        }
    }
    if !(wt > 0.0 && wc > 0.0) {
        return Err(Error::DegenerateArm(format!(
            "an arm has zero total weight under the {} scheme",
            scheme.name()
        )));
    }
    let total = wt + wc;
    m1.iter_mut().for_each(|v| *v /= total);
    m2.iter_mut().for_each(|v| *v /= total);
    Ok((m1, m2))
}

fn profile_from_moments(m1: &[f64], m2: &[f64]) -> GroupProfile {
    GroupProfile {
        means: m1.to_vec(),
        sds: m1.iter().zip(m2).map(|(a, b)| (b - a * a).max(0.0).sqrt()).collect(),
    }
}

/// Covariate profiles of the recruited sample and of the always,
/// always-or-incentivized and incentivized strata. The incentivized profile
/// is the stratum decomposition `(ac - nu a) / (1 - nu)` applied to the
/// first and second moments.
pub fn strata_covariate_profile(
    dataset: &RecruitedDataset,
    e_values: &[f64],
    nu: f64,
    guard: f64,
) -> Result<StrataProfile> {
    check_propensities(dataset, e_values)?;
    if nu >= 1.0 - guard {
        return Err(Error::NoIncentivized { nu, guard });
    }
    let unit = vec![0.5; dataset.n()];
    // Under the recruited scheme with e = 1/2 every weight is 2: plain means.
    let (r1, r2) = weighted_moments(dataset, &unit, &Recruited)?;
    let (a1, a2) = weighted_moments(dataset, e_values, &AlwaysRecruited)?;
    let (ac1, ac2) = weighted_moments(dataset, e_values, &AlwaysOrIncentivized)?;
    let split =
        |ac: &[f64], a: &[f64]| -> Vec<f64> { ac.iter().zip(a).map(|(x, y)| (x - nu * y) / (1.0 - nu)).collect() };
    let (c1, c2) = (split(&ac1, &a1), split(&ac2, &a2));
    Ok(StrataProfile {
        covariate_names: dataset.covariate_names().to_vec(),
        recruited: profile_from_moments(&r1, &r2),
        always: profile_from_moments(&a1, &a2),
        always_or_incentivized: profile_from_moments(&ac1, &ac2),
        incentivized: profile_from_moments(&c1, &c2),
    })
}
