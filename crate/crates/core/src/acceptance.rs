//! Programmatic acceptance checks for the estimators, the inference methods,
//! the sensitivity solver and the simulation engine.
//!
//! Each criterion produces a measured value and a pass/fail verdict against a
//! fixed tolerance. The Monte Carlo criteria are the expensive ones: the
//! bootstrap coverage check alone refits the working propensity model tens of
//! thousands of times. Quick mode halves its replication count and marks the
//! verdict as indicative.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{DatasetBuilder, RecruitedDataset};
use crate::error::Result;
use crate::estimators::{
    estimate_from_propensities, estimate_tau_c, hajek, AlwaysOrIncentivized, AlwaysRecruited, Estimand, EstimateConfig,
    Recruited, Scaled, SCHEMES,
};
use crate::inference::{psi_contributions, ThetaHat};
use crate::sensitivity::{
    bound_weighted_mean, bound_weighted_mean_enumerated, bounds_tau_a, bounds_tau_ac, bounds_tau_c,
    bounds_tau_c_enumerated, gamma_grid, SensitivityAnalysis, BOUNDED_ESTIMANDS,
};
use crate::simulate::{generate_stream, run_study, sample_truths, SimScenario, StudyConfig, StudyOutput};
use crate::wps::{fit, FitSettings, PseudoLikelihood};

pub const CRITERIA: [u8; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceptanceConfig {
    pub seed: u64,
    /// Fewer bootstrap-coverage replications; that verdict becomes indicative.
    pub quick: bool,
    /// Subset of criteria to run; empty runs all.
    pub criteria: Vec<u8>,
    pub threads: Option<usize>,
    /// Fault injection: shifts the embedded recruitment intercepts.
    pub corrupt_coefficients: bool,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        Self {
            seed: 20240601,
            quick: false,
            criteria: Vec::new(),
            threads: None,
            corrupt_coefficients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub indicative: bool,
    pub measured: String,
    pub target: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} {}{}: {} | measured {} | target {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            if self.indicative { " (indicative)" } else { "" },
            self.name,
            self.measured,
            self.target
        )
    }
}

struct Ctx<'a> {
    config: &'a AcceptanceConfig,
    main_study: Option<StudyOutput>,
}

impl Ctx<'_> {
    fn scenario(&self, label: &str) -> SimScenario {
        let mut s = SimScenario::from_label(label).expect("registered scenario");
        if self.config.corrupt_coefficients {
            s.beta_r0[0] += 0.8;
            s.alpha[0] += 0.8;
        }
        s
    }

    fn study(&self, label: &str, n_reps: usize, known: bool, boot: usize) -> Result<StudyOutput> {
        run_study(
            &self.scenario(label),
            &StudyConfig {
                n_reps,
                seed: self.config.seed,
                known_sandwich: known,
                bootstrap_replicates: boot,
                threads: self.config.threads,
                ..StudyConfig::default()
            },
        )
    }

    /// B-1-balanced at 500 clusters, 200 replications with known-propensity
    /// sandwich intervals; shared by criteria 3, 6 and 7.
    fn main_study(&mut self) -> Result<&StudyOutput> {
        if self.main_study.is_none() {
            self.main_study = Some(self.study("B-1-balanced-J500", 200, true, 0)?);
        }
        Ok(self.main_study.as_ref().expect("just computed"))
    }
}

fn result(id: u8, name: &str, passed: bool, measured: String, target: &str) -> CriterionResult {
    CriterionResult {
        id,
        name: name.into(),
        passed,
        indicative: false,
        measured,
        target: target.into(),
    }
}

fn failed(id: u8, name: &str, err: impl fmt::Display, target: &str) -> CriterionResult {
    result(id, name, false, format!("error: {err}"), target)
}

/// Runs the selected criteria in order.
pub fn run_acceptance(config: &AcceptanceConfig) -> Vec<CriterionResult> {
    let mut ctx = Ctx {
        config,
        main_study: None,
    };
    CRITERIA
        .into_iter()
        .filter(|id| config.criteria.is_empty() || config.criteria.contains(id))
        .map(|id| {
            log::info!("running acceptance criterion {id}");
            match id {
                1 => criterion_prevalences(&ctx),
                2 => criterion_truths(&ctx),
                3 => criterion_bias(&mut ctx),
                4 | 5 => criterion_wps(&ctx, id),
                6 => criterion_coverage(&mut ctx),
                7 => criterion_naive(&mut ctx),
                8 => criterion_sensitivity(config.seed),
                9 => criterion_consistency(&ctx),
                _ => unreachable!(),
            }
        })
        .collect()
}

fn criterion_prevalences(ctx: &Ctx<'_>) -> CriterionResult {
    const NAME: &str = "stratum prevalences, case 1 balanced, 500 clusters, 50 seeds";
    const TARGET: &str = "every prevalence within 1.5 points of its design target";
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for family in ["A", "B", "C"] {
        let s = ctx.scenario(&format!("{family}-1-balanced-J500"));
        let mut prev = [0.0; 3];
        for seed in 0..50 {
            match generate_stream(&s, ctx.config.seed, seed) {
                Ok(pop) => {
                    let t = sample_truths(&pop);
                    for k in 0..3 {
                        prev[k] += t.prevalences[k] / 50.0;
                    }
                }
                Err(e) => return failed(1, NAME, e, TARGET),
            }
        }
        let target = s.stratum_targets();
        for k in 0..3 {
            worst = worst.max((prev[k] - target[k]).abs());
        }
        parts.push(format!(
            "{family}=({:.1}/{:.1}/{:.1})",
            100.0 * prev[0],
            100.0 * prev[1],
            100.0 * prev[2]
        ));
    }
    result(
        1,
        NAME,
        worst <= 0.015,
        format!("{}; max deviation {:.2} points", parts.join(" "), 100.0 * worst),
        TARGET,
    )
}

fn criterion_truths(ctx: &Ctx<'_>) -> CriterionResult {
    const NAME: &str = "population truths across the 12 design cells at 500 clusters";
    const TARGET: &str =
        "mean tau_O within 0.03 of 3; recruited in [2.61, 2.91], always in [2.54, 2.78], incentivized in [2.78, 3.17]";
    let ranges = [(2.61, 2.91), (2.54, 2.78), (2.78, 3.17)];
    let mut ok = true;
    let mut tau_o = Vec::new();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for family in ["A", "B", "C"] {
        for case in [1, 2] {
            for design in ["balanced", "imbalanced"] {
                let s = ctx.scenario(&format!("{family}-{case}-{design}-J500"));
                let mut sums = [0.0; 4];
                let reps = 10;
                for seed in 0..reps {
                    let pop = match generate_stream(&s, ctx.config.seed, seed) {
                        Ok(p) => p,
                        Err(e) => return failed(2, NAME, e, TARGET),
                    };
                    let t = sample_truths(&pop);
                    let vals = [
                        t.tau_o,
                        t.tau_r,
                        t.tau_a.unwrap_or(f64::NAN),
                        t.tau_c.unwrap_or(f64::NAN),
                    ];
                    for k in 0..4 {
                        sums[k] += vals[k] / reps as f64;
                    }
                }
                tau_o.push(sums[0]);
                ok &= (sums[0] - 3.0).abs() <= 0.03;
                for k in 0..3 {
                    let v = sums[k + 1];
                    lo[k] = lo[k].min(v);
                    hi[k] = hi[k].max(v);
                    ok &= v >= ranges[k].0 && v <= ranges[k].1;
                }
            }
        }
    }
    let dev = tau_o.iter().map(|t| (t - 3.0).abs()).fold(0.0, f64::max);
    result(
        2,
        NAME,
        ok,
        format!(
            "max |tau_O - 3| {dev:.4}; recruited {:.3}-{:.3}, always {:.3}-{:.3}, incentivized {:.3}-{:.3}",
            lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
        ),
        TARGET,
    )
}

fn criterion_bias(ctx: &mut Ctx<'_>) -> CriterionResult {
    const NAME: &str = "estimated-propensity bias, B-1-balanced, 500 clusters, 200 replications";
    const TARGET: &str = "|mean bias| <= 0.05 for tau_R, tau_a, tau_c";
    let out = match ctx.main_study() {
        Ok(o) => o,
        Err(e) => return failed(3, NAME, e, TARGET),
    };
    let mut ok = out.summary.completed == 200;
    let mut parts = vec![format!("{} replications", out.summary.completed)];
    for e in [Estimand::TauR, Estimand::TauA, Estimand::TauC] {
        match out.summary.find("estimated", e) {
            Some(s) => {
                ok &= s.mean_bias.abs() <= 0.05;
                parts.push(format!("{e} {:+.4} (MC-SE {:.4})", s.mean_bias, s.mc_se));
            }
            None => {
                ok = false;
                parts.push(format!("{e} unavailable"));
            }
        }
    }
    result(3, NAME, ok, parts.join(", "), TARGET)
}

fn criterion_wps(ctx: &Ctx<'_>, id: u8) -> CriterionResult {
    let (name, target) = if id == 4 {
        (
            "working propensity coefficients, A-1-balanced, 800 clusters, 200 replications",
            "per-coefficient mean |alpha_hat - alpha| <= 0.05",
        )
    } else {
        (
            "always-recruited share nu, A-1-balanced, 800 clusters, 200 replications",
            "mean |nu_hat - nu| <= 0.02",
        )
    };
    let out = match ctx.study("A-1-balanced-J800", 200, false, 0) {
        Ok(o) => o,
        Err(e) => return failed(id, name, e, target),
    };
    let s = &out.summary;
    let complete = s.completed == 200;
    if id == 4 {
        let worst = s.alpha_mean_abs_error.iter().fold(0.0_f64, |m, v| m.max(*v));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
        result(
            4,
            name,
            complete && worst <= 0.05,
            format!(
                "mean absolute error [{}]; bias [{}]",
                fmt(&s.alpha_mean_abs_error),
                fmt(&s.alpha_bias)
            ),
            target,
        )
    } else {
        result(
            5,
            name,
            complete && s.nu_mean_abs_error <= 0.02,
            format!("mean |nu_hat - nu| {:.4}, bias {:+.4}", s.nu_mean_abs_error, s.nu_bias),
            target,
        )
    }
}

fn criterion_coverage(ctx: &mut Ctx<'_>) -> CriterionResult {
    const NAME: &str = "95% interval coverage, B-1-balanced, 500 clusters";
    const TARGET: &str = "known-propensity sandwich in [0.88, 0.99] (200 reps); bootstrap (B = 300) tau_R, tau_a in [0.90, 0.995], tau_c in [0.80, 0.96]";
    let quick = ctx.config.quick;
    let known_ok;
    let mut parts = Vec::new();
    {
        let out = match ctx.main_study() {
            Ok(o) => o,
            Err(e) => return failed(6, NAME, e, TARGET),
        };
        let mut ok = out.summary.completed == 200;
        for e in [Estimand::TauR, Estimand::TauA, Estimand::TauC] {
            let c = out.summary.find("known", e).and_then(|s| s.coverage_of("sandwich"));
            ok &= c.is_some_and(|c| (0.88..=0.99).contains(&c));
            parts.push(format!(
                "sandwich {e} {}",
                c.map_or("n/a".into(), |c| format!("{c:.3}"))
            ));
        }
        known_ok = ok;
    }
    let reps = if quick { 100 } else { 200 };
    let boot = match ctx.study("B-1-balanced-J500", reps, false, 300) {
        Ok(o) => o,
        Err(e) => return failed(6, NAME, e, TARGET),
    };
    let mut boot_ok = boot.summary.completed == reps;
    for (e, lo, hi) in [
        (Estimand::TauR, 0.90, 0.995),
        (Estimand::TauA, 0.90, 0.995),
        (Estimand::TauC, 0.80, 0.96),
    ] {
        let c = boot
            .summary
            .find("estimated", e)
            .and_then(|s| s.coverage_of("bootstrap-normal"));
        boot_ok &= c.is_some_and(|c| c >= lo && c <= hi);
        parts.push(format!(
            "bootstrap {e} {}",
            c.map_or("n/a".into(), |c| format!("{c:.3}"))
        ));
    }
    parts.push(format!("{} bootstrap replications", boot.summary.completed));
    let mut r = result(6, NAME, known_ok && boot_ok, parts.join(", "), TARGET);
    r.indicative = quick;
    r
}

fn criterion_naive(ctx: &mut Ctx<'_>) -> CriterionResult {
    const NAME: &str = "naive difference in means, B-1-balanced, 500 clusters";
    const TARGET: &str = "naive mean outside 3 MC-SE of every population truth";
    let out = match ctx.main_study() {
        Ok(o) => o,
        Err(e) => return failed(7, NAME, e, TARGET),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    let naive = out.summary.find("naive", Estimand::TauR).map(|s| s.mean_estimate);
    if let Some(v) = naive {
        parts.push(format!("naive mean {v:.4}"));
    }
    // Overall-population effect, with the naive track's own spread.
    let o_diff: Vec<f64> = out.replicates.iter().map(|r| r.naive - r.truths.tau_o).collect();
    let o_mean = o_diff.iter().sum::<f64>() / o_diff.len() as f64;
    let o_sd = (o_diff.iter().map(|d| (d - o_mean).powi(2)).sum::<f64>() / (o_diff.len() - 1) as f64).sqrt();
    let o_se = o_sd / (o_diff.len() as f64).sqrt();
    ok &= o_mean.abs() > 3.0 * o_se;
    parts.push(format!("vs tau_O {o_mean:+.4} ({:.1} SE)", o_mean.abs() / o_se));
    for e in [Estimand::TauR, Estimand::TauA, Estimand::TauAc, Estimand::TauC] {
        match out.summary.find("naive", e) {
            Some(s) => {
                ok &= s.mean_bias.abs() > 3.0 * s.mc_se;
                parts.push(format!(
                    "vs {e} {:+.4} ({:.1} SE)",
                    s.mean_bias,
                    s.mean_bias.abs() / s.mc_se
                ));
            }
            None => ok = false,
        }
    }
    result(7, NAME, ok, parts.join(", "), TARGET)
}

fn random_dataset(rng: &mut ChaCha8Rng, max_rows: usize, pi: f64) -> (RecruitedDataset, Vec<f64>) {
    let n = rng.random_range(2..=max_rows);
    let n_t = rng.random_range(1..n);
    let mut b = DatasetBuilder::new(1, vec!["x".into()]);
    let mut e = Vec::with_capacity(n);
    for i in 0..n {
        b.begin_cluster(i.to_string(), i < n_t);
        b.push_row(&[0.0], rng.random_range(-3.0..3.0)).expect("finite row");
        e.push(rng.random_range(0.05..0.95));
    }
    (b.finish(pi).expect("two arms"), e)
}

fn criterion_sensitivity(seed: u64) -> CriterionResult {
    const NAME: &str = "sensitivity solver exactness";
    const TARGET: &str = "scan = 2^n enumeration within 1e-9 (1000 instances, n <= 12); gamma = 1 bounds = point within 1e-10; width monotone on a 20-point grid; conservative tau_c bounds contain sharp bounds (n <= 6)";
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E45);
    let mut max_enum: f64 = 0.0;
    let mut max_gamma1: f64 = 0.0;
    let mut monotone_violations = 0usize;
    let mut containment_violations = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..=12);
        let units: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.05..5.0), rng.random_range(-3.0..3.0)))
            .collect();
        let gamma = rng.random_range(1.0..6.0);
        let (Ok(scan), Ok(brute)) = (
            bound_weighted_mean(&units, gamma),
            bound_weighted_mean_enumerated(&units, gamma),
        ) else {
            return failed(8, NAME, "solver rejected a valid instance", TARGET);
        };
        max_enum = max_enum.max((scan.0 - brute.0).abs()).max((scan.1 - brute.1).abs());

        let mut prev = f64::NEG_INFINITY;
        for g in gamma_grid(gamma.max(1.5) * 2.0, 20) {
            let (lo, hi) = bound_weighted_mean(&units, g).expect("valid instance");
            if hi - lo < prev - 1e-12 {
                monotone_violations += 1;
            }
            prev = hi - lo;
        }
    }
    for _ in 0..1000 {
        let (ds, e) = random_dataset(&mut rng, 6, 0.3);
        let Ok(sa) = SensitivityAnalysis::new(&ds, &e) else {
            return failed(8, NAME, "could not set up a random instance", TARGET);
        };
        let report = match estimate_from_propensities(&ds, &e, &EstimateConfig::default()) {
            Ok(r) => r,
            Err(err) => return failed(8, NAME, err, TARGET),
        };
        for est in BOUNDED_ESTIMANDS {
            if let (Ok(b), Some(p)) = (sa.bounds(est, 1.0), report.point(est)) {
                max_gamma1 = max_gamma1.max((b.lower - p).abs()).max((b.upper - p).abs());
            }
        }
        let gamma = rng.random_range(1.0..4.0);
        let nu = rng.random_range(0.0..0.9);
        let (Ok(a), Ok(ac)) = (bounds_tau_a(&ds, &e, gamma), bounds_tau_ac(&ds, &e, gamma)) else {
            return failed(8, NAME, "component bounds failed", TARGET);
        };
        let (Ok(c), Ok((lo, hi))) = (
            bounds_tau_c(&a, &ac, nu, 0.02),
            bounds_tau_c_enumerated(&ds, &e, nu, gamma),
        ) else {
            return failed(8, NAME, "tau_c bounds failed", TARGET);
        };
        let tol = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
        if c.lower > lo + tol || hi > c.upper + tol {
            containment_violations += 1;
        }
    }
    let passed = max_enum <= 1e-9 && max_gamma1 <= 1e-10 && monotone_violations == 0 && containment_violations == 0;
    result(
        8,
        NAME,
        passed,
        format!(
            "max scan-enumeration gap {max_enum:.2e}; max gamma=1 gap {max_gamma1:.2e}; {monotone_violations} monotonicity and {containment_violations} containment violations"
        ),
        TARGET,
    )
}

fn criterion_consistency(ctx: &Ctx<'_>) -> CriterionResult {
    const NAME: &str = "internal consistency on a simulated B-1-balanced trial (200 clusters)";
    const TARGET: &str = "g(theta_hat) = estimators within 1e-12; psi sums to 0 within 1e-8; pseudo-likelihood gradient = finite differences (relative 1e-5); Hajek scale and duplication invariance within 1e-12";
    let run = || -> Result<(f64, f64, f64, f64, f64)> {
        let s = ctx.scenario("B-1-balanced-J200");
        let ds = generate_stream(&s, ctx.config.seed, 0)?.recruited_dataset()?;
        let fitted = fit(&ds, None, &FitSettings::default())?;
        let e = fitted.model.propensities(&ds)?;
        let report = estimate_from_propensities(&ds, &e, &EstimateConfig::default())?;

        let theta = ThetaHat::compute(&ds, &e)?;
        let g = theta.g(report.nu);
        let tau_a = hajek(&ds, &e, &AlwaysRecruited)?;
        let tau_ac = hajek(&ds, &e, &AlwaysOrIncentivized)?;
        let tau_r = hajek(&ds, &e, &Recruited)?;
        let tau_c = estimate_tau_c(tau_a, tau_ac, report.nu, 0.02)?;
        let g_gap = [(g[0] - tau_a).abs(), (g[1] - tau_c).abs(), (g[2] - tau_r).abs()]
            .into_iter()
            .fold(0.0, f64::max);

        let psi = psi_contributions(&ds, &e)?;
        let psi_gap = (0..12)
            .map(|k| psi.iter().map(|p| p[k]).sum::<f64>().abs())
            .fold(0.0, f64::max);

        let pl = PseudoLikelihood::from_dataset(&ds);
        let mut grad_gap: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
        for _ in 0..5 {
            let alpha: Vec<f64> = s.alpha.iter().map(|a| a + rng.random_range(-0.5..0.5)).collect();
            let grad = pl.gradient(&alpha);
            let scale = grad.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
            for k in 0..alpha.len() {
                let h = 1e-5;
                let mut up = alpha.clone();
                up[k] += h;
                let mut dn = alpha.clone();
                dn[k] -= h;
                let fd = (pl.log_likelihood(&up) - pl.log_likelihood(&dn)) / (2.0 * h);
                grad_gap = grad_gap.max((fd - grad[k]).abs() / scale);
            }
        }

        let mut inv_gap: f64 = 0.0;
        let idx: Vec<usize> = (0..ds.n_clusters()).chain(0..ds.n_clusters()).collect();
        let (dup, origin) = ds.resample_clusters(&idx)?;
        let e_dup: Vec<f64> = origin.iter().map(|&i| e[i]).collect();
        for scheme in SCHEMES {
            let base = hajek(&ds, &e, scheme)?;
            let scaled = hajek(
                &ds,
                &e,
                &Scaled {
                    inner: scheme,
                    treated: 7.3,
                    control: 0.041,
                },
            )?;
            let doubled = hajek(&dup, &e_dup, scheme)?;
            inv_gap = inv_gap.max((base - scaled).abs()).max((base - doubled).abs());
        }
        Ok((g_gap, psi_gap, grad_gap, inv_gap, report.nu))
    };
    match run() {
        Ok((g_gap, psi_gap, grad_gap, inv_gap, _)) => result(
            9,
            NAME,
            g_gap <= 1e-12 && psi_gap <= 1e-8 && grad_gap <= 1e-5 && inv_gap <= 1e-12,
            format!(
                "g gap {g_gap:.1e}; psi sum {psi_gap:.1e}; gradient gap {grad_gap:.1e}; invariance gap {inv_gap:.1e}"
            ),
            TARGET,
        ),
        Err(e) => failed(9, NAME, e, TARGET),
    }
}
