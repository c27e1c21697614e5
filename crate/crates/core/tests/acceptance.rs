//! Full acceptance suite: one pass/fail line per criterion.
//!
//! `CRTRECRUIT_ACCEPTANCE_QUICK=1` runs the reduced bootstrap-coverage
//! variant; `CRTRECRUIT_ACCEPTANCE_CRITERIA=1,2,8` restricts the run.

use crtrecruit::acceptance::{run_acceptance, AcceptanceConfig};

#[test]
fn acceptance_criteria() {
    let quick = std::env::var("CRTRECRUIT_ACCEPTANCE_QUICK").is_ok_and(|v| v != "0" && !v.is_empty());
    let criteria = std::env::var("CRTRECRUIT_ACCEPTANCE_CRITERIA")
        .map(|v| v.split(',').filter_map(|c| c.trim().parse().ok()).collect())
        .unwrap_or_default();
    let results = run_acceptance(&AcceptanceConfig {
        quick,
        criteria,
        ..AcceptanceConfig::default()
    });
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
