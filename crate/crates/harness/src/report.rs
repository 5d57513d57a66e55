//! Aggregates `results.csv` into one line per method and phase: soup, best and
//! mean candidate test accuracy as mean and sample standard deviation over
//! seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::Row;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub phase: usize,
    pub sparsity: f64,
    pub seeds: usize,
    pub soup_mean: f64,
    pub soup_std: f64,
    pub best_mean: f64,
    pub best_std: f64,
    pub mean_mean: f64,
    pub mean_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(rows: &[Row]) -> Vec<ReportRow> {
    #[derive(Default)]
    struct Acc {
        sparsity: Vec<f64>,
        soup: Vec<f64>,
        best: Vec<f64>,
        mean: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, usize), Acc> = BTreeMap::new();
    for r in rows {
        let acc = groups.entry((r.method.clone(), r.phase)).or_default();
        let test = f64::from(r.test_acc);
        match r.entry.as_str() {
            "soup" => {
                acc.soup.push(test);
                acc.sparsity.push(r.sparsity);
            }
            "best" => acc.best.push(test),
            "mean" => acc.mean.push(test),
            _ => {}
        }
    }
    groups
        .into_iter()
        .filter(|(_, a)| !a.soup.is_empty())
        .map(|((method, phase), a)| {
            let soup = mean_std(&a.soup);
            let best = mean_std(&a.best);
            let mean = mean_std(&a.mean);
            ReportRow {
                method,
                phase,
                sparsity: mean_std(&a.sparsity).0,
                seeds: a.soup.len(),
                soup_mean: soup.0,
                soup_std: soup.1,
                best_mean: best.0,
                best_std: best.1,
                mean_mean: mean.0,
                mean_std: mean.1,
            }
        })
        .collect()
}

pub fn render(report: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>5} {:>8} {:>5}  {:>17}  {:>17}  {:>17}",
        "method", "phase", "sparsity", "seeds", "soup", "best candidate", "mean candidate"
    );
    for r in report {
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>8.4} {:>5}  {:>8.2} ± {:<6.2}  {:>8.2} ± {:<6.2}  {:>8.2} ± {:<6.2}",
            r.method,
            r.phase,
            r.sparsity,
            r.seeds,
            100.0 * r.soup_mean,
            100.0 * r.soup_std,
            100.0 * r.best_mean,
            100.0 * r.best_std,
            100.0 * r.mean_mean,
            100.0 * r.mean_std
        );
    }
    s
}

/// Reads `results.csv` in `dir`, writes `report.csv` next to it and returns
/// the aggregated rows.
pub fn write_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let rows = crate::experiment::read_rows(&dir.join("results.csv"))?;
    let report = aggregate(&rows);
    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in &report {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: usize, entry: &str, seed: u64, acc: f32) -> Row {
        Row {
            run_id: format!("sms-s{seed}"),
            method: "sms".into(),
            phase,
            sparsity: 0.5,
            m: 2,
            entry: entry.into(),
            val_acc: acc,
            test_acc: acc,
            ood_acc: None,
            speedup: 2.0,
            l2_mean: None,
            l2_max: None,
            seed,
            timestamp: 0,
        }
    }

    #[test]
    fn sample_statistics() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn one_line_per_phase() {
        let mut rows = Vec::new();
        for seed in 0..3 {
            for phase in 1..=2 {
                rows.push(row(phase, "0", seed, 0.5));
                rows.push(row(phase, "soup", seed, 0.5 + seed as f32 * 0.25));
                rows.push(row(phase, "best", seed, 0.5));
                rows.push(row(phase, "mean", seed, 0.5));
            }
        }
        let report = aggregate(&rows);
        assert_eq!(report.len(), 2);
        assert_eq!(report.iter().map(|r| r.phase).collect::<Vec<_>>(), [1, 2]);
        assert!(report.iter().all(|r| r.seeds == 3));
        assert!((report[0].soup_mean - 0.75).abs() < 1e-12);
        assert!((report[0].soup_std - 0.25).abs() < 1e-12);
        assert_eq!(report[0].best_std, 0.0);
    }
}
