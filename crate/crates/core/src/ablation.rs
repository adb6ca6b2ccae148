//! Runs the training pipeline for several variants and seeds on one
//! dataset and tabulates the test reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::{Precision, RunConfig, Variant};
use crate::data::{Dataset, Scenario};
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::train::{run_pipeline, Observer};

/// One report per (variant, seed, scenario), in the order given.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], seeds: &[u64], ds: &Dataset) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let cfg = RunConfig {
                variant,
                seed,
                ..base.clone()
            };
            cfg.validate()?;
            log::info!("ablation: {variant} seed {seed}");
            let reports = match cfg.precision {
                Precision::F32 => run_pipeline::<f32, _>(&cfg, ds, &mut ())?,
                Precision::F64 => run_pipeline::<f64, _>(&cfg, ds, &mut ())?,
            };
            out.extend(reports);
        }
    }
    Ok(out)
}

/// Run the pipeline with any observer at the configured precision.
pub fn run_at_precision<O>(cfg: &RunConfig, ds: &Dataset, observer: &mut O) -> Result<Vec<MetricsReport>>
where
    O: Observer<f32> + Observer<f64>,
{
    match cfg.precision {
        Precision::F32 => run_pipeline::<f32, _>(cfg, ds, observer),
        Precision::F64 => run_pipeline::<f64, _>(cfg, ds, observer),
    }
}

/// HR@10 of `variant` on `scenario`, keyed by seed.
pub fn hr10_by_seed(reports: &[MetricsReport], variant: Variant, scenario: Scenario) -> BTreeMap<u64, f64> {
    reports
        .iter()
        .filter(|r| r.variant == variant && r.scenario == scenario)
        .map(|r| (r.seed, r.hr10))
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Seed-wise HR@10 table for one scenario: a row per seed, a column per
/// variant, and a closing median row.
pub fn comparison_table(reports: &[MetricsReport], scenario: Scenario) -> String {
    let mut variants: Vec<Variant> = Vec::new();
    for r in reports.iter().filter(|r| r.scenario == scenario) {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let columns: Vec<BTreeMap<u64, f64>> = variants.iter().map(|&v| hr10_by_seed(reports, v, scenario)).collect();
    let mut seeds: Vec<u64> = columns.iter().flat_map(|c| c.keys().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = format!("HR@10 ({scenario})\n{:>8}", "seed");
    for v in &variants {
        let _ = write!(out, " {:>8}", v.tag());
    }
    for s in &seeds {
        let _ = write!(out, "\n{s:>8}");
        for c in &columns {
            match c.get(s) {
                Some(x) => {
                    let _ = write!(out, " {x:>8.4}");
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
    }
    let _ = write!(out, "\n{:>8}", "median");
    for c in &columns {
        let vals: Vec<f64> = c.values().copied().collect();
        let _ = write!(out, " {:>8.4}", median(&vals).unwrap_or(f64::NAN));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(variant: Variant, seed: u64, hr10: f64) -> MetricsReport {
        MetricsReport {
            scenario: Scenario::Search,
            hr5: hr10 / 2.0,
            hr10,
            ndcg5: hr10 / 4.0,
            ndcg10: hr10 / 3.0,
            n_users: 10,
            seed,
            variant,
            config_hash: String::new(),
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn table_has_seed_rows_and_median() {
        let reports = vec![
            report(Variant::Full, 1, 0.5),
            report(Variant::Full, 2, 0.7),
            report(Variant::WoCA, 1, 0.4),
        ];
        let t = comparison_table(&reports, Scenario::Search);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains("full") && lines[1].contains("woCA"));
        assert!(lines[3].contains('-'));
        assert!(lines[4].starts_with("  median") && lines[4].contains("0.6000"));
    }
}
