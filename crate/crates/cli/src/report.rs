//! `report.json`: per-grid-point aggregates over the runs of an output
//! directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::FinalMasks;
use crate::error::{CliError, Result};
use crate::metrics::read_metrics_csv;
use crate::runner::Job;

/// Mean and sample standard deviation (`n − 1` denominator; absent for a
/// single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Self { n, mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    #[serde(flatten)]
    pub job: Job,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: usize,
    pub grid_point: usize,
    pub seed: u64,
    /// Joint-training epochs recorded in metrics.csv.
    pub epochs: usize,
    pub test_accuracy: f64,
    pub mask_loss: f64,
    pub baseline_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub grid_point: usize,
    pub lambda_init: f64,
    pub lambda_fac: f64,
    pub completed: usize,
    pub failed: usize,
    pub test_accuracy: Option<Stat>,
    pub mask_loss: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub grid: Vec<GridSummary>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<Failure>,
}

/// Aggregates `metrics.csv` and `masks_final/` of `out`. A run's final
/// values come from its last metrics row, or from its mask file when it
/// trained for zero epochs.
pub fn build_report(out: &Path, name: &str, failures: &[Failure]) -> Result<Report> {
    let rows = read_metrics_csv(&out.join("metrics.csv"))?;
    let dir = out.join("masks_final");
    let mut finals = BTreeMap::new();
    if dir.exists() {
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let f = FinalMasks::load(&path)?;
                finals.insert(f.run_id, f);
            }
        }
    }

    let mut by_run: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for r in rows {
        by_run.entry(r.run_id).or_default().push(r);
    }
    let failed = |id: usize| failures.iter().any(|f| f.job.run_id == id);
    if let Some(id) = by_run.keys().find(|&&id| !finals.contains_key(&id) && !failed(id)) {
        return Err(CliError::parse(
            out.join("metrics.csv"),
            format!("run {id} has metrics but neither a final-mask file nor a recorded failure"),
        ));
    }

    let runs: Vec<RunSummary> = finals
        .values()
        .map(|f| {
            let history = by_run.get(&f.run_id);
            let last = history.and_then(|h| h.last());
            RunSummary {
                run_id: f.run_id,
                grid_point: f.grid_point,
                seed: f.seed,
                epochs: history.map_or(0, Vec::len),
                test_accuracy: last.map_or(f.test_accuracy, |r| r.test_acc),
                mask_loss: last.map_or(f.mask_loss, |r| r.mask_loss),
                baseline_accuracy: f.baseline_accuracy,
            }
        })
        .collect();

    let mut points: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for f in finals.values() {
        points.insert(f.grid_point, (f.lambda_init, f.lambda_fac));
    }
    for f in failures {
        points.insert(f.job.grid_point, (f.job.lambda_init, f.job.lambda_fac));
    }
    let grid = points
        .into_iter()
        .map(|(g, (lambda_init, lambda_fac))| {
            let here: Vec<&RunSummary> = runs.iter().filter(|r| r.grid_point == g).collect();
            let acc: Vec<f64> = here.iter().map(|r| r.test_accuracy).collect();
            let q: Vec<f64> = here.iter().map(|r| r.mask_loss).collect();
            GridSummary {
                grid_point: g,
                lambda_init,
                lambda_fac,
                completed: here.len(),
                failed: failures.iter().filter(|f| f.job.grid_point == g).count(),
                test_accuracy: Stat::of(&acc),
                mask_loss: Stat::of(&q),
            }
        })
        .collect();

    Ok(Report {
        name: name.to_string(),
        grid,
        runs,
        failures: failures.to_vec(),
    })
}

/// Builds the report and writes it to `out/report.json`.
pub fn write_report(out: &Path, name: &str, failures: &[Failure]) -> Result<Report> {
    let report = build_report(out, name, failures)?;
    let path = out.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

/// Recomputes `report.json` of a finished output directory, keeping the
/// name and failures recorded by the run.
pub fn recompute_report(out: &Path) -> Result<Report> {
    let path = out.join("report.json");
    let (name, failures) = match std::fs::read_to_string(&path) {
        Ok(text) => {
            let old: Report = serde_json::from_str(&text).map_err(|e| CliError::json(&path, e))?;
            (old.name, old.failures)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ("run".to_string(), Vec::new()),
        Err(e) => return Err(CliError::io(&path, e)),
    };
    write_report(out, &name, &failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        // Σ(x − 2.5)² = 5, divided by n − 1 = 3
        assert_eq!(s.std, Some((5.0f64 / 3.0).sqrt()));
        assert_eq!(Stat::of(&[0.7]).unwrap().std, None);
        assert!(Stat::of(&[]).is_none());
    }
}
