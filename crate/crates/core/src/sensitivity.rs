//! Sensitivity of the principal-stratum estimators to unmeasured
//! confounding of recruitment.
//!
//! A violation of level `gamma` lets every recruited unit's weight be
//! distorted by an unknown factor `rho` in `[1/gamma, gamma]`. The extreme
//! weighted means over that box are linear-fractional programs whose optima
//! sit at box vertices ordered by outcome, so they are found exactly by
//! sorting once and scanning every threshold.

use serde::Serialize;

use crate::data::RecruitedDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    check_propensities, estimate_nu, AlwaysOrIncentivized, AlwaysRecruited, Estimand, WeightScheme, DEFAULT_NU_GUARD,
};

/// Estimator range at one sensitivity level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaBound {
    pub gamma: f64,
    pub estimand: Estimand,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl GammaBound {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::InvalidInput(format!(
            "gamma must be a finite value >= 1, got {gamma}"
        )));
    }
    Ok(())
}

fn check_units(units: &[(f64, f64)]) -> Result<()> {
    if units.is_empty() {
        return Err(Error::InvalidInput("weighted mean of an empty set".into()));
    }
    if let Some((w, y)) = units
        .iter()
        .find(|(w, y)| !(*w > 0.0) || !w.is_finite() || !y.is_finite())
    {
        return Err(Error::InvalidInput(format!("invalid unit (w = {w}, y = {y})")));
    }
    Ok(())
}

/// `(min, max)` of `sum rho w y / sum rho w` over `rho_i` in `[1/gamma, gamma]`
/// for units given as `(w, y)`.
pub fn bound_weighted_mean(units: &[(f64, f64)], gamma: f64) -> Result<(f64, f64)> {
    check_units(units)?;
    check_gamma(gamma)?;
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| units[a].1.total_cmp(&units[b].1));

    // Prefix sums over the outcome-sorted units.
    let n = units.len();
    let mut pw = vec![0.0; n + 1];
    let mut pwy = vec![0.0; n + 1];
    for (k, &i) in order.iter().enumerate() {
        let (w, y) = units[i];
        pw[k + 1] = pw[k] + w;
        pwy[k + 1] = pwy[k] + w * y;
    }
    let (tw, twy) = (pw[n], pwy[n]);
    let lo_f = 1.0 / gamma;

    // Split s: the s smallest outcomes take one factor, the rest the other.
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for s in 0..=n {
        let (bw, bwy) = (pw[s], pwy[s]);
        let (aw, awy) = (tw - bw, twy - bwy);
        let up = (lo_f * bwy + gamma * awy) / (lo_f * bw + gamma * aw);
        let down = (gamma * bwy + lo_f * awy) / (gamma * bw + lo_f * aw);
        max = max.max(up);
        min = min.min(down);
    }
    // Absorb rounding so the nominal mean always lies inside.
    let nominal = weighted_mean(units);
    Ok((min.min(nominal), max.max(nominal)))
}

/// Exhaustive search over all `2^n` box vertices; a verification oracle for
/// [`bound_weighted_mean`], limited to `n <= 20`.
pub fn bound_weighted_mean_enumerated(units: &[(f64, f64)], gamma: f64) -> Result<(f64, f64)> {
    check_units(units)?;
    check_gamma(gamma)?;
    if units.len() > 20 {
        return Err(Error::InvalidInput(format!(
            "vertex enumeration limited to 20 units, got {}",
            units.len()
        )));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for mask in 0u32..(1 << units.len()) {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (w, y)) in units.iter().enumerate() {
            let rho = if mask >> i & 1 == 1 { gamma } else { 1.0 / gamma };
            num += rho * w * y;
            den += rho * w;
        }
        let v = num / den;
        min = min.min(v);
        max = max.max(v);
    }
    Ok((min, max))
}

fn arm_units(
    dataset: &RecruitedDataset,
    e_values: &[f64],
    scheme: &dyn WeightScheme,
    treated: bool,
) -> Vec<(f64, f64)> {
    dataset
        .treatment()
        .iter()
        .zip(dataset.outcomes())
        .zip(e_values)
        .filter(|((&z, _), _)| z == treated)
        .map(|((_, &y), &e)| {
            let w = if treated {
                scheme.treated_weight(e)
            } else {
                scheme.control_weight(e)
            };
            (w, y)
        })
        .collect()
}

fn weighted_mean(units: &[(f64, f64)]) -> f64 {
    let (num, den) = units.iter().fold((0.0, 0.0), |(n, d), (w, y)| (n + w * y, d + w));
    num / den
}

fn nonempty(units: &[(f64, f64)], arm: &str) -> Result<()> {
    if units.is_empty() {
        return Err(Error::DegenerateArm(format!(
            "no recruited individuals in the {arm} arm"
        )));
    }
    Ok(())
}

/// Bounds on the always-recruited estimator: the treated weighted mean varies
/// over the box while the unweighted control mean stays fixed.
pub fn bounds_tau_a(dataset: &RecruitedDataset, e_values: &[f64], gamma: f64) -> Result<GammaBound> {
    check_propensities(dataset, e_values)?;
    let treated = arm_units(dataset, e_values, &AlwaysRecruited, true);
    let control = arm_units(dataset, e_values, &AlwaysRecruited, false);
    nonempty(&treated, "treated")?;
    nonempty(&control, "control")?;
    let (lo, hi) = bound_weighted_mean(&treated, gamma)?;
    let c = weighted_mean(&control);
    Ok(GammaBound {
        gamma,
        estimand: Estimand::TauA,
        point: weighted_mean(&treated) - c,
        lower: lo - c,
        upper: hi - c,
    })
}

/// Bounds on the always-or-incentivized estimator: the control weighted mean
/// varies while the unweighted treated mean stays fixed.
pub fn bounds_tau_ac(dataset: &RecruitedDataset, e_values: &[f64], gamma: f64) -> Result<GammaBound> {
    check_propensities(dataset, e_values)?;
    let treated = arm_units(dataset, e_values, &AlwaysOrIncentivized, true);
    let control = arm_units(dataset, e_values, &AlwaysOrIncentivized, false);
    nonempty(&treated, "treated")?;
    nonempty(&control, "control")?;
    let (lo, hi) = bound_weighted_mean(&control, gamma)?;
    let t = weighted_mean(&treated);
    Ok(GammaBound {
        gamma,
        estimand: Estimand::TauAc,
        point: t - weighted_mean(&control),
        lower: t - hi,
        upper: t - lo,
    })
}

/// Conservative incentivized-stratum bounds from the two component bounds,
/// with `nu` held at its point estimate.
pub fn bounds_tau_c(bound_a: &GammaBound, bound_ac: &GammaBound, nu: f64, nu_guard: f64) -> Result<GammaBound> {
    if bound_a.gamma != bound_ac.gamma {
        return Err(Error::InvalidInput(format!(
            "component bounds at different gamma ({} and {})",
            bound_a.gamma, bound_ac.gamma
        )));
    }
    if !(nu >= 0.0) {
        return Err(Error::InvalidInput(format!("nu must be nonnegative, got {nu}")));
    }
    if nu >= 1.0 - nu_guard {
        return Err(Error::NoIncentivized { nu, guard: nu_guard });
    }
    let z1 = 1.0 / (1.0 - nu);
    let k = nu * z1;
    Ok(GammaBound {
        gamma: bound_a.gamma,
        estimand: Estimand::TauC,
        point: z1 * bound_ac.point - k * bound_a.point,
        lower: z1 * bound_ac.lower - k * bound_a.upper,
        upper: z1 * bound_ac.upper - k * bound_a.lower,
    })
}

/// Sharp incentivized-stratum bounds by joint enumeration of every unit's
/// `rho`; a verification oracle limited to 20 recruited individuals.
pub fn bounds_tau_c_enumerated(
    dataset: &RecruitedDataset,
    e_values: &[f64],
    nu: f64,
    gamma: f64,
) -> Result<(f64, f64)> {
    check_propensities(dataset, e_values)?;
    check_gamma(gamma)?;
    let n = dataset.n();
    if n > 20 {
        return Err(Error::InvalidInput(format!(
            "joint enumeration limited to 20 units, got {n}"
        )));
    }
    let z1 = 1.0 / (1.0 - nu);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for mask in 0u32..(1 << n) {
        let rho = |i: usize| if mask >> i & 1 == 1 { gamma } else { 1.0 / gamma };
        // [treated a-weighted, control plain, treated plain, control ac-weighted]
        let mut sums = [[0.0; 2]; 4];
        for i in 0..n {
            let (y, e) = (dataset.outcomes()[i], e_values[i]);
            let cells: [(usize, f64); 2] = if dataset.treatment()[i] {
                [(0, rho(i) * AlwaysRecruited.treated_weight(e)), (2, 1.0)]
            } else {
                [(1, 1.0), (3, rho(i) * AlwaysOrIncentivized.control_weight(e))]
            };
            for (k, w) in cells {
                sums[k][0] += w * y;
                sums[k][1] += w;
            }
        }
        let m = |k: usize| sums[k][0] / sums[k][1];
        let tau_a = m(0) - m(1);
        let tau_ac = m(2) - m(3);
        let tau_c = z1 * tau_ac - nu * z1 * tau_a;
        lo = lo.min(tau_c);
        hi = hi.max(tau_c);
    }
    Ok((lo, hi))
}

/// Search settings for [`SensitivityAnalysis::minimal_gamma`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaSearch {
    pub gamma_max: f64,
    pub tolerance: f64,
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self {
            gamma_max: 10.0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", content = "gamma", rename_all = "kebab-case")]
pub enum GammaStar {
    /// Smallest level (to the search tolerance) whose bounds include zero.
    Found(f64),
    /// Bounds exclude zero even at the search ceiling.
    ExceedsMax(f64),
}

/// Sensitivity analysis of one dataset under fixed propensities.
#[derive(Debug, Clone)]
pub struct SensitivityAnalysis<'a> {
    dataset: &'a RecruitedDataset,
    e_values: &'a [f64],
    nu: f64,
    nu_guard: f64,
}

/// Estimands with defined sensitivity bounds.
pub const BOUNDED_ESTIMANDS: [Estimand; 3] = [Estimand::TauA, Estimand::TauAc, Estimand::TauC];

impl<'a> SensitivityAnalysis<'a> {
    /// Uses the estimated (clipped) `nu` for the incentivized-stratum bounds.
    pub fn new(dataset: &'a RecruitedDataset, e_values: &'a [f64]) -> Result<Self> {
        check_propensities(dataset, e_values)?;
        Ok(Self {
            dataset,
            e_values,
            nu: estimate_nu(dataset)?.nu,
            nu_guard: DEFAULT_NU_GUARD,
        })
    }

    pub fn with_nu_guard(mut self, nu_guard: f64) -> Self {
        self.nu_guard = nu_guard;
        self
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn bounds(&self, estimand: Estimand, gamma: f64) -> Result<GammaBound> {
        match estimand {
            Estimand::TauA => bounds_tau_a(self.dataset, self.e_values, gamma),
            Estimand::TauAc => bounds_tau_ac(self.dataset, self.e_values, gamma),
            Estimand::TauC => bounds_tau_c(
                &bounds_tau_a(self.dataset, self.e_values, gamma)?,
                &bounds_tau_ac(self.dataset, self.e_values, gamma)?,
                self.nu,
                self.nu_guard,
            ),
            other => Err(Error::InvalidInput(format!(
                "no sensitivity bounds are defined for {other}"
            ))),
        }
    }

    /// Bounds for every available estimand at every level of `gammas`;
    /// `tau_c` is skipped when `nu` is too close to one.
    pub fn table(&self, gammas: &[f64]) -> Result<Vec<GammaBound>> {
        let mut out = Vec::with_capacity(gammas.len() * BOUNDED_ESTIMANDS.len());
        for &g in gammas {
            for est in BOUNDED_ESTIMANDS {
                match self.bounds(est, g) {
                    Ok(b) => out.push(b),
                    Err(Error::NoIncentivized { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(out)
    }

    /// Smallest `gamma` whose bounds include zero, by bisection.
    pub fn minimal_gamma(&self, estimand: Estimand, search: &GammaSearch) -> Result<GammaStar> {
        check_gamma(search.gamma_max)?;
        if !(search.tolerance > 0.0) {
            return Err(Error::InvalidInput("gamma search tolerance must be positive".into()));
        }
        if self.bounds(estimand, 1.0)?.point == 0.0 {
            return Ok(GammaStar::Found(1.0));
        }
        let covers = |g: f64| self.bounds(estimand, g).map(|b| b.contains(0.0));
        if covers(1.0)? {
            return Ok(GammaStar::Found(1.0));
        }
        if !covers(search.gamma_max)? {
            return Ok(GammaStar::ExceedsMax(search.gamma_max));
        }
        let (mut lo, mut hi) = (1.0, search.gamma_max);
        while hi - lo > search.tolerance {
            let mid = 0.5 * (lo + hi);
            if covers(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(GammaStar::Found(hi))
    }
}

/// `n` levels evenly spaced on `[1, gamma_max]`.
pub fn gamma_grid(gamma_max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n)
            .map(|k| 1.0 + (gamma_max - 1.0) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetBuilder;
    use crate::estimators::{estimate_from_propensities, hajek, EstimateConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Charnes-Cooper linearization solved by a dense tableau simplex.
    ///
    /// With `t = 1 / sum rho w` and `u = rho t` the program becomes
    /// `max sum w y u` subject to `sum w u = 1` and `t / gamma <= u <= gamma t`.
    /// Substituting `u = v + t / gamma` and shifting `y` positive lets the
    /// equality be relaxed to `<= 1`, which is tight at the optimum, so the
    /// problem has the form `max c x, A x <= b, x >= 0, b >= 0`.
    fn lp_max_weighted_mean(units: &[(f64, f64)], gamma: f64) -> f64 {
        let n = units.len();
        let shift = 1.0 - units.iter().map(|u| u.1).fold(f64::INFINITY, f64::min);
        let sw: f64 = units.iter().map(|u| u.0).sum();
        let g = gamma - 1.0 / gamma;
        // Variables: v_0..v_{n-1}, t. Rows: n box rows, one normalization row.
        let cols = n + 1;
        let mut a = vec![vec![0.0; cols]; n + 1];
        let mut b = vec![0.0; n + 1];
        for i in 0..n {
            a[i][i] = 1.0;
            a[i][n] = -g;
        }
        for (i, (w, _)) in units.iter().enumerate() {
            a[n][i] = *w;
        }
        a[n][n] = sw / gamma;
        b[n] = 1.0;
        let mut c = vec![0.0; cols];
        for (i, (w, y)) in units.iter().enumerate() {
            c[i] = w * (y + shift);
            c[n] += w * (y + shift) / gamma;
        }
        simplex_max(&a, &b, &c) - shift
    }

    /// `max c x` s.t. `A x <= b`, `x >= 0` with `b >= 0`; Bland's rule.
    fn simplex_max(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
        let (m, n) = (a.len(), c.len());
        let width = n + m + 1;
        let mut tab = vec![vec![0.0; width]; m + 1];
        for i in 0..m {
            tab[i][..n].copy_from_slice(&a[i]);
            tab[i][n + i] = 1.0;
            tab[i][width - 1] = b[i];
        }
        for j in 0..n {
            tab[m][j] = -c[j];
        }
        let mut basis: Vec<usize> = (n..n + m).collect();
        while let Some(enter) = (0..n + m).find(|&j| tab[m][j] < -1e-12) {
            let mut leave = None;
            let mut best = f64::INFINITY;
            for i in 0..m {
                if tab[i][enter] > 1e-12 {
                    let ratio = tab[i][width - 1] / tab[i][enter];
                    let better = ratio < best - 1e-15
                        || (ratio <= best + 1e-15 && leave.is_some_and(|l: usize| basis[i] < basis[l]));
                    if better {
                        best = ratio;
                        leave = Some(i);
                    }
                }
            }
            let r = leave.expect("bounded program");
            let p = tab[r][enter];
            tab[r].iter_mut().for_each(|v| *v /= p);
            for i in 0..=m {
                if i != r {
                    let f = tab[i][enter];
                    if f != 0.0 {
                        for j in 0..width {
                            tab[i][j] -= f * tab[r][j];
                        }
                    }
                }
            }
            basis[r] = enter;
        }
        tab[m][width - 1]
    }

    fn random_units(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.random_range(0.05..5.0), rng.random_range(-3.0..3.0)))
            .collect()
    }

    fn toy() -> (RecruitedDataset, Vec<f64>) {
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        let rows = [
            ("t1", true, [(1.0, 0.6), (2.5, 0.4), (0.5, 0.7)]),
            ("t2", true, [(3.0, 0.5), (-1.0, 0.3), (1.5, 0.65)]),
            ("c1", false, [(0.0, 0.45), (1.0, 0.55), (2.0, 0.35)]),
            ("c2", false, [(0.5, 0.6), (-0.5, 0.5), (1.2, 0.4)]),
        ];
        let mut e = Vec::new();
        for (id, z, units) in rows {
            b.begin_cluster(id, z);
            for (y, p) in units {
                b.push_row(&[0.0], y).unwrap();
                e.push(p);
            }
        }
        (b.finish(0.3).unwrap(), e)
    }

    #[test]
    fn two_unit_example() {
        let (lo, hi) = bound_weighted_mean(&[(1.0, 0.0), (1.0, 1.0)], 2.0).unwrap();
        assert!((hi - 0.8).abs() < 1e-15);
        assert!((lo - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gamma_one_gives_the_weighted_mean() {
        let units = [(1.0, 2.0), (3.0, -1.0), (0.5, 4.0)];
        let m = (2.0 - 3.0 + 2.0) / 4.5;
        let (lo, hi) = bound_weighted_mean(&units, 1.0).unwrap();
        assert!((lo - m).abs() < 1e-12 && (hi - m).abs() < 1e-12);
    }

    #[test]
    fn huge_gamma_approaches_outcome_range() {
        let units = [(1.0, 2.0), (3.0, -1.0), (0.5, 4.0), (2.0, 0.0)];
        let (lo, hi) = bound_weighted_mean(&units, 1e6).unwrap();
        assert!((lo + 1.0).abs() < 1e-5 && (hi - 4.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(bound_weighted_mean(&[], 2.0).is_err());
        assert!(bound_weighted_mean(&[(1.0, 1.0)], 0.5).is_err());
        assert!(bound_weighted_mean(&[(0.0, 1.0)], 2.0).is_err());
    }

    #[test]
    fn scan_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(1..=10);
            let units = random_units(&mut rng, n);
            let gamma = rng.random_range(1.0..6.0);
            let (a, b) = bound_weighted_mean(&units, gamma).unwrap();
            let (c, d) = bound_weighted_mean_enumerated(&units, gamma).unwrap();
            assert!((a - c).abs() <= 1e-9 && (b - d).abs() <= 1e-9);
        }
    }

    #[test]
    fn scan_matches_charnes_cooper_linear_program() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=15);
            let units = random_units(&mut rng, n);
            let gamma = rng.random_range(1.0..8.0);
            let (lo, hi) = bound_weighted_mean(&units, gamma).unwrap();
            let lp_hi = lp_max_weighted_mean(&units, gamma);
            let neg: Vec<(f64, f64)> = units.iter().map(|(w, y)| (*w, -y)).collect();
            let lp_lo = -lp_max_weighted_mean(&neg, gamma);
            assert!((hi - lp_hi).abs() <= 1e-8, "{hi} vs {lp_hi}");
            assert!((lo - lp_lo).abs() <= 1e-8, "{lo} vs {lp_lo}");
        }
    }

    #[test]
    fn ties_do_not_change_the_optimum() {
        let units = [(1.0, 1.0), (2.0, 1.0), (0.5, 0.0), (1.5, 1.0), (1.0, 0.0)];
        let a = bound_weighted_mean(&units, 3.0).unwrap();
        let b = bound_weighted_mean_enumerated(&units, 3.0).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn component_bounds_match_enumeration_on_toy() {
        let (ds, e) = toy();
        let ba = bounds_tau_a(&ds, &e, 2.0).unwrap();
        let treated: Vec<(f64, f64)> = (0..6).map(|i| ((1.0 - e[i]) / e[i], ds.outcomes()[i])).collect();
        let (lo, hi) = bound_weighted_mean_enumerated(&treated, 2.0).unwrap();
        let c = ds.outcomes()[6..].iter().sum::<f64>() / 6.0;
        assert!((ba.lower - (lo - c)).abs() < 1e-12 && (ba.upper - (hi - c)).abs() < 1e-12);

        let bac = bounds_tau_ac(&ds, &e, 3.0).unwrap();
        let control: Vec<(f64, f64)> = (6..12).map(|i| (e[i] / (1.0 - e[i]), ds.outcomes()[i])).collect();
        let (lo, hi) = bound_weighted_mean_enumerated(&control, 3.0).unwrap();
        let t = ds.outcomes()[..6].iter().sum::<f64>() / 6.0;
        assert!((bac.lower - (t - hi)).abs() < 1e-12 && (bac.upper - (t - lo)).abs() < 1e-12);
    }

    #[test]
    fn gamma_one_collapses_to_point_estimates() {
        let (ds, e) = toy();
        let sa = SensitivityAnalysis::new(&ds, &e).unwrap();
        let report = estimate_from_propensities(&ds, &e, &EstimateConfig::default()).unwrap();
        for est in BOUNDED_ESTIMANDS {
            let b = sa.bounds(est, 1.0).unwrap();
            let p = report.point(est).unwrap();
            assert!((b.lower - p).abs() <= 1e-10 && (b.upper - p).abs() <= 1e-10, "{est}");
            assert!((b.point - p).abs() <= 1e-12);
        }
        assert!(
            (sa.bounds(Estimand::TauA, 1.0).unwrap().point - hajek(&ds, &e, &AlwaysRecruited).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn constant_outcomes_give_zero_bounds() {
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        for j in 0..4 {
            b.begin_cluster(format!("{j}"), j < 2);
            b.push_row(&[0.0], 2.5).unwrap();
            b.push_row(&[1.0], 2.5).unwrap();
        }
        let ds = b.finish(0.5).unwrap();
        let e = [0.3, 0.6, 0.5, 0.7, 0.2, 0.4, 0.55, 0.45];
        let bac = bounds_tau_ac(&ds, &e, 4.0).unwrap();
        assert!(bac.lower.abs() < 1e-12 && bac.upper.abs() < 1e-12);
    }

    #[test]
    fn tau_c_bounds_reduce_to_tau_ac_at_nu_zero() {
        let (ds, e) = toy();
        let a = bounds_tau_a(&ds, &e, 2.0).unwrap();
        let ac = bounds_tau_ac(&ds, &e, 2.0).unwrap();
        let c = bounds_tau_c(&a, &ac, 0.0, 0.02).unwrap();
        assert_eq!((c.lower, c.upper), (ac.lower, ac.upper));
        assert!(matches!(
            bounds_tau_c(&a, &ac, 0.99, 0.02),
            Err(Error::NoIncentivized { .. })
        ));
        let ac3 = bounds_tau_ac(&ds, &e, 3.0).unwrap();
        assert!(bounds_tau_c(&a, &ac3, 0.2, 0.02).is_err());
    }

    #[test]
    fn conservative_tau_c_bounds_contain_sharp_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut b = DatasetBuilder::new(1, vec!["x".into()]);
            let n_t = rng.random_range(1..=3);
            let n_c = rng.random_range(1..=3);
            let mut e = Vec::new();
            for (k, z) in std::iter::repeat_n(true, n_t)
                .chain(std::iter::repeat_n(false, n_c))
                .enumerate()
            {
                b.begin_cluster(format!("{k}"), z);
                b.push_row(&[0.0], rng.random_range(-2.0..2.0)).unwrap();
                e.push(rng.random_range(0.1..0.9));
            }
            let ds = b.finish(0.5).unwrap();
            let gamma = rng.random_range(1.0..4.0);
            let nu = rng.random_range(0.0..0.9);
            let a = bounds_tau_a(&ds, &e, gamma).unwrap();
            let ac = bounds_tau_ac(&ds, &e, gamma).unwrap();
            let c = bounds_tau_c(&a, &ac, nu, 0.02).unwrap();
            let (lo, hi) = bounds_tau_c_enumerated(&ds, &e, nu, gamma).unwrap();
            let tol = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
            assert!(c.lower <= lo + tol && hi <= c.upper + tol);
        }
    }

    #[test]
    fn minimal_gamma_matches_grid_search() {
        // Treated outcomes 1 and -0.2 against a control outcome of 0: tau_a = 0.4.
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        b.begin_cluster("t", true);
        b.push_row(&[0.0], 1.0).unwrap();
        b.push_row(&[0.0], -0.2).unwrap();
        b.begin_cluster("c", false);
        b.push_row(&[0.0], 0.0).unwrap();
        let ds = b.finish(0.5).unwrap();
        let e = [0.5, 0.5, 0.5];
        let sa = SensitivityAnalysis::new(&ds, &e).unwrap();
        assert!((sa.bounds(Estimand::TauA, 1.0).unwrap().point - 0.4).abs() < 1e-12);
        let GammaStar::Found(g) = sa.minimal_gamma(Estimand::TauA, &GammaSearch::default()).unwrap() else {
            panic!("expected a finite gamma");
        };
        let grid = (0..90_000)
            .map(|k| 1.0 + k as f64 * 1e-4)
            .find(|&g| sa.bounds(Estimand::TauA, g).unwrap().contains(0.0))
            .unwrap();
        assert!((g - grid).abs() <= 2e-4, "{g} vs {grid}");
        // Lower bound (1 - 0.2 g^2) / (1 + g^2) hits zero at g = sqrt(5).
        assert!((g - 5f64.sqrt()).abs() <= 1e-4);
    }

    #[test]
    fn minimal_gamma_edge_cases() {
        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        b.begin_cluster("t", true);
        b.push_row(&[0.0], 1.0).unwrap();
        b.push_row(&[0.0], -1.0).unwrap();
        b.begin_cluster("c", false);
        b.push_row(&[0.0], 0.0).unwrap();
        let ds = b.finish(0.5).unwrap();
        let e = [0.5; 3];
        let sa = SensitivityAnalysis::new(&ds, &e).unwrap();
        assert_eq!(
            sa.minimal_gamma(Estimand::TauA, &GammaSearch::default()).unwrap(),
            GammaStar::Found(1.0)
        );

        let mut b = DatasetBuilder::new(1, vec!["x".into()]);
        b.begin_cluster("t", true);
        b.push_row(&[0.0], 5.0).unwrap();
        b.push_row(&[0.0], 4.0).unwrap();
        b.begin_cluster("c", false);
        b.push_row(&[0.0], 0.0).unwrap();
        let ds = b.finish(0.5).unwrap();
        let sa = SensitivityAnalysis::new(&ds, &e).unwrap();
        assert_eq!(
            sa.minimal_gamma(Estimand::TauA, &GammaSearch::default()).unwrap(),
            GammaStar::ExceedsMax(10.0)
        );
        assert!(sa.bounds(Estimand::TauR, 2.0).is_err());
    }

    #[test]
    fn table_covers_grid_and_estimands() {
        let (ds, e) = toy();
        let sa = SensitivityAnalysis::new(&ds, &e).unwrap();
        let t = sa.table(&gamma_grid(3.0, 5)).unwrap();
        assert_eq!(t.len(), 15);
        assert_eq!(gamma_grid(3.0, 5), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    proptest! {
        #[test]
        fn width_is_monotone_in_gamma(
            units in prop::collection::vec((0.01f64..10.0, -5.0f64..5.0), 1..30),
            gmax in 1.0f64..20.0,
        ) {
            let mut prev = -1.0;
            for g in gamma_grid(gmax, 20) {
                let (lo, hi) = bound_weighted_mean(&units, g).unwrap();
                prop_assert!(hi - lo >= prev - 1e-12);
                prev = hi - lo;
            }
        }

        #[test]
        fn bounds_are_weight_scale_invariant(
            units in prop::collection::vec((0.01f64..10.0, -5.0f64..5.0), 1..30),
            scale in 0.001f64..1000.0,
            gamma in 1.0f64..10.0,
        ) {
            let (lo, hi) = bound_weighted_mean(&units, gamma).unwrap();
            let scaled: Vec<(f64, f64)> = units.iter().map(|(w, y)| (w * scale, *y)).collect();
            let (slo, shi) = bound_weighted_mean(&scaled, gamma).unwrap();
            prop_assert!((lo - slo).abs() <= 1e-10 && (hi - shi).abs() <= 1e-10);
        }

        #[test]
        fn bounds_bracket_the_weighted_mean(
            units in prop::collection::vec((0.01f64..10.0, -5.0f64..5.0), 1..30),
            gamma in 1.0f64..10.0,
        ) {
            let (lo, hi) = bound_weighted_mean(&units, gamma).unwrap();
            let m = weighted_mean(&units);
            prop_assert!(lo <= m + 1e-12 && m <= hi + 1e-12);
        }
    }
}
