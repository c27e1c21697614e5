use crtrecruit::data::{read_csv, write_csv, CsvSchema, DatasetBuilder, RecruitedDataset};
use crtrecruit::estimators::{estimate_from_propensities, Estimand, EstimateConfig};
use crtrecruit::inference::{interval_method, BootstrapConfig, InferenceContext, PropensitySource};
use crtrecruit::sensitivity::SensitivityAnalysis;
use crtrecruit::simulate::{generate, sample_truths, SimScenario};
use crtrecruit::wps::{fit, FitInit, FitSettings};
use proptest::prelude::*;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn design_row(pop: &crtrecruit::simulate::SimPopulation, i: usize) -> [f64; 6] {
    let c = pop.covariates_of(i);
    [1.0, c[0], c[1], c[2], c[3], c[4]]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn outcome_residuals_have_the_target_intraclass_correlation() {
    let scenario = SimScenario::from_label("B-1-balanced-J800").unwrap();
    let pop = generate(&scenario, 314).unwrap();
    let k = scenario.cluster_size;
    let resid: Vec<f64> = (0..pop.n())
        .map(|i| pop.y0[i] - dot(&scenario.beta_y0, &design_row(&pop, i)))
        .collect();

    let grand = resid.iter().sum::<f64>() / resid.len() as f64;
    let (mut ssb, mut ssw) = (0.0, 0.0);
    for cluster in resid.chunks(k) {
        let m = cluster.iter().sum::<f64>() / k as f64;
        ssb += k as f64 * (m - grand).powi(2);
        ssw += cluster.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let j = scenario.clusters as f64;
    let msb = ssb / (j - 1.0);
    let msw = ssw / (j * (k as f64 - 1.0));
    let icc = (msb - msw) / (msb + (k as f64 - 1.0) * msw);
    assert!((icc - scenario.icc).abs() < 0.03, "icc {icc}");

    let total = resid.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
    assert!((total / scenario.sigma2 - 1.0).abs() < 0.1, "variance {total}");
}

#[test]
fn treated_to_control_recruitment_ratio_follows_delta() {
    let scenario = SimScenario::from_label("A-1-balanced-J800").unwrap();
    let pop = generate(&scenario, 2718).unwrap();
    let delta: Vec<f64> = (0..pop.n())
        .map(|i| 1.0 + (-dot(&scenario.alpha, &design_row(&pop, i))).exp())
        .collect();

    let mut order: Vec<usize> = (0..pop.n()).collect();
    order.sort_by(|&a, &b| delta[a].total_cmp(&delta[b]));
    for bin in order.chunks(order.len().div_ceil(5)) {
        // E[R(1)] = E[delta P(R(0) = 1)], bin by bin.
        let r1 = bin.iter().filter(|&&i| pop.r1[i]).count() as f64;
        let expected: f64 = bin
            .iter()
            .map(|&i| delta[i] * expit(dot(&scenario.beta_r0[..6], &design_row(&pop, i))))
            .sum();
        assert!((r1 / expected - 1.0).abs() < 0.05, "ratio {}", r1 / expected);
    }
}

#[test]
fn simulated_trial_end_to_end() {
    let scenario = SimScenario::from_label("B-1-balanced-J200").unwrap();
    let pop = generate(&scenario, 99).unwrap();
    let truths = sample_truths(&pop);
    let ds = pop.recruited_dataset().unwrap();

    let settings = FitSettings::default();
    let fitted = fit(&ds, None, &settings).unwrap();
    assert!(fitted.converged);
    let e = fitted.model.propensities(&ds).unwrap();
    let cfg = EstimateConfig::default();
    let report = estimate_from_propensities(&ds, &e, &cfg).unwrap();
    for estimand in [Estimand::TauR, Estimand::TauA, Estimand::TauAc, Estimand::TauC] {
        let (est, truth) = (report.point(estimand).unwrap(), truths.get(estimand).unwrap());
        assert!((est - truth).abs() < 0.4, "{estimand}: {est} vs {truth}");
    }

    let source = PropensitySource::Refit {
        settings,
        init: FitInit {
            alpha: Some(fitted.model.alpha.clone()),
            inverse_hessian: fitted.inverse_hessian.clone(),
        },
    };
    let ctx = InferenceContext {
        dataset: &ds,
        e_values: &e,
        report: &report,
        propensity: source,
        level: 0.95,
        nu_guard: cfg.nu_guard,
    };
    let boot = BootstrapConfig {
        replicates: 60,
        seed: 4,
        ..BootstrapConfig::default()
    };
    for name in ["sandwich", "bootstrap"] {
        let intervals = interval_method(name, &boot).unwrap().intervals(&ctx).unwrap();
        assert!(!intervals.is_empty());
        for iv in intervals {
            let p = report.point(iv.estimand).unwrap();
            assert!(iv.se > 0.0 && iv.se < 1.0, "{name} {}: se {}", iv.estimand, iv.se);
            assert!(iv.lower < iv.upper);
            if iv.method != "bootstrap-percentile" {
                assert!(iv.lower <= p && p <= iv.upper);
            }
        }
    }

    let sens = SensitivityAnalysis::new(&ds, &e).unwrap();
    for b in sens.table(&[1.0, 2.0]).unwrap() {
        assert!(b.contains(b.point), "{b:?}");
        if b.gamma == 1.0 {
            assert!(b.width() < 1e-9);
        }
    }
}

fn arb_rows() -> impl Strategy<Value = (usize, Vec<(usize, f64, Vec<f64>)>)> {
    (1usize..4).prop_flat_map(|dim| {
        let row = (
            0usize..6,
            -1e6f64..1e6,
            prop::collection::vec(prop_oneof![-1e3f64..1e3, Just(0.0), Just(1.0)], dim),
        );
        (Just(dim), prop::collection::vec(row, 2..40))
    })
}

fn build(dim: usize, rows: &[(usize, f64, Vec<f64>)]) -> Option<RecruitedDataset> {
    let names = (0..dim).map(|k| format!("x{k}")).collect();
    let mut b = DatasetBuilder::new(dim, names);
    let mut clusters: Vec<usize> = rows.iter().map(|r| r.0).collect();
    clusters.sort_unstable();
    clusters.dedup();
    for c in clusters {
        b.begin_cluster(format!("site-{c}"), c % 2 == 0);
        for r in rows.iter().filter(|r| r.0 == c) {
            b.push_row(&r.2, r.1).ok()?;
        }
    }
    b.finish(0.4).ok()
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact((dim, rows) in arb_rows()) {
        let Some(ds) = build(dim, &rows) else { return Ok(()) };
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default(), 0.4).unwrap();
        prop_assert_eq!(back.n(), ds.n());
        prop_assert_eq!(back.covariate_names(), ds.covariate_names());
        prop_assert_eq!(back.outcomes(), ds.outcomes());
        prop_assert_eq!(back.covariate_matrix(), ds.covariate_matrix());
        prop_assert_eq!(back.treatment(), ds.treatment());
        let ids = |d: &RecruitedDataset| d.clusters().iter().map(|c| (c.id.clone(), c.treated, c.rows())).collect::<Vec<_>>();
        prop_assert_eq!(ids(&back), ids(&ds));
    }
}
