use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::RUNS_DIR;
use super::RunError;
use crate::metrics::MetricsReport;

/// Mean with the sample standard deviation, absent for a single run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }

    fn show(&self) -> String {
        match self.std {
            Some(s) => format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * s),
            None => format!("{:.1}", 100.0 * self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub runs: usize,
    pub avg_jga: Stat,
    /// Absent when any run has no zero-shot entries.
    pub fwt: Option<Stat>,
    pub bwt: Option<Stat>,
    pub tunable_params_per_task: usize,
    pub stored_params_total: usize,
    pub backbone_params: usize,
    /// Tunable parameters per task over backbone parameters.
    pub tunable_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: Vec<MethodRow>,
    pub runs: Vec<MetricsReport>,
}

impl RunSummary {
    pub fn from_reports(runs: Vec<MetricsReport>) -> Self {
        let mut by: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
        for r in &runs {
            by.entry(r.method.as_str()).or_default().push(r);
        }
        let rows = by
            .into_iter()
            .map(|(method, rs)| {
                let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<Stat> {
                    let xs: Option<Vec<f64>> = rs.iter().map(|r| f(r)).collect();
                    xs.and_then(|xs| Stat::of(&xs))
                };
                let first = rs[0];
                MethodRow {
                    method: method.to_string(),
                    runs: rs.len(),
                    avg_jga: col(&|r| Some(r.avg_jga)).expect("at least one run"),
                    fwt: col(&|r| r.fwt),
                    bwt: col(&|r| r.bwt),
                    tunable_params_per_task: first.tunable_params_per_task,
                    stored_params_total: first.stored_params_total,
                    backbone_params: first.backbone_params,
                    tunable_fraction: if first.backbone_params == 0 {
                        0.0
                    } else {
                        first.tunable_params_per_task as f64 / first.backbone_params as f64
                    },
                }
            })
            .collect();
        Self { rows, runs }
    }

    /// Fixed-width table, accuracies in percent.
    pub fn to_text(&self) -> String {
        let header = ["method", "runs", "Avg. JGA", "FWT", "BWT", "tunable/task", "stored", "tunable %"];
        let cells: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.runs.to_string(),
                    r.avg_jga.show(),
                    r.fwt.map_or("-".into(), |s| s.show()),
                    r.bwt.map_or("-".into(), |s| s.show()),
                    r.tunable_params_per_task.to_string(),
                    r.stored_params_total.to_string(),
                    format!("{:.3}", 100.0 * r.tunable_fraction),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }

    /// One row per method; empty cells for absent values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,runs,avg_jga_mean,avg_jga_std,fwt_mean,fwt_std,bwt_mean,bwt_std,tunable_params_per_task,stored_params_total,backbone_params,tunable_fraction\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.runs,
                r.avg_jga.mean,
                opt(r.avg_jga.std),
                opt(r.fwt.map(|s| s.mean)),
                opt(r.fwt.and_then(|s| s.std)),
                opt(r.bwt.map(|s| s.mean)),
                opt(r.bwt.and_then(|s| s.std)),
                r.tunable_params_per_task,
                r.stored_params_total,
                r.backbone_params,
                r.tunable_fraction
            );
        }
        out
    }
}

/// Collects every finished run under `dir` and writes `summary.txt` and
/// `summary.csv` next to them.
pub fn summarize(dir: &Path) -> Result<RunSummary, RunError> {
    let runs_dir = dir.join(RUNS_DIR);
    let mut reports = Vec::new();
    if runs_dir.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&runs_dir)
            .map_err(RunError::io(&runs_dir))?
            .filter_map(Result::ok)
            .map(|e| e.path().join("metrics.json"))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            let bytes = fs::read(&p).map_err(RunError::io(&p))?;
            reports.push(serde_json::from_slice::<MetricsReport>(&bytes).map_err(RunError::json(&p))?);
        }
    }
    if reports.is_empty() {
        return Err(RunError::NoRuns(dir.to_path_buf()));
    }
    let summary = RunSummary::from_reports(reports);
    let txt = dir.join("summary.txt");
    fs::write(&txt, summary.to_text()).map_err(RunError::io(&txt))?;
    let csv = dir.join("summary.csv");
    fs::write(&csv, summary.to_csv()).map_err(RunError::io(&csv))?;
    Ok(summary)
}
