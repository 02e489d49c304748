use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TASK_GLOBAL: &str = "global";
pub const TASK_LOCAL: &str = "local";

/// One evaluation outcome. `mode` is `-` for global rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub task: String,
    pub seed: u64,
    #[serde(serialize_with = "fixed6")]
    pub auc: f64,
    pub n_context: usize,
    pub mode: String,
}

fn fixed6<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean and sample standard deviation over seeds for one method on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub task: String,
    pub mode: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.task.clone(), r.mode.clone(), r.method.clone()))
            .or_default()
            .push(r.auc);
    }
    groups
        .into_iter()
        .map(|((task, mode, method), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Summary {
                method,
                task,
                mode,
                seeds: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Average rank of each method across tasks, ranking by mean AUC within a
/// task (1 = best, ties share the average rank). Only methods present in
/// every task are ranked.
pub fn mean_ranks(summaries: &[Summary]) -> Vec<(String, f64)> {
    let mut tasks: BTreeMap<(String, String), Vec<&Summary>> = BTreeMap::new();
    for s in summaries {
        tasks.entry((s.task.clone(), s.mode.clone())).or_default().push(s);
    }
    let complete: BTreeSet<&str> = summaries
        .iter()
        .map(|s| s.method.as_str())
        .filter(|m| tasks.values().all(|t| t.iter().any(|s| s.method == *m)))
        .collect();
    let mut total: BTreeMap<&str, f64> = BTreeMap::new();
    for entries in tasks.values() {
        let ranked: Vec<&&Summary> = entries.iter().filter(|s| complete.contains(s.method.as_str())).collect();
        for s in &ranked {
            let better = ranked.iter().filter(|o| o.mean > s.mean).count() as f64;
            let tied = ranked.iter().filter(|o| o.mean == s.mean).count() as f64;
            *total.entry(s.method.as_str()).or_insert(0.0) += better + (tied + 1.0) / 2.0;
        }
    }
    let n_tasks = tasks.len().max(1) as f64;
    let mut out: Vec<(String, f64)> = total.into_iter().map(|(m, r)| (m.to_string(), r / n_tasks)).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Writes `summary.csv` (mean ± std per method and task) and
/// `rank_summary.csv` (mean rank per method) into `dir`.
pub fn write_summaries(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let summaries = summarize(rows);
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["method", "task", "mode", "seeds", "mean", "std"])?;
    for s in &summaries {
        w.write_record([
            s.method.clone(),
            s.task.clone(),
            s.mode.clone(),
            s.seeds.to_string(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("rank_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["method", "mean_rank"])?;
    for (m, r) in mean_ranks(&summaries) {
        w.write_record([m, format!("{r:.4}")])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
