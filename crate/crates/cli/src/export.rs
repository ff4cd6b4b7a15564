//! Plot data: per-group mean and standard deviation of the accuracy curves,
//! one CSV file per panel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::metrics::{read_metrics, MetricsHeader, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    RunId,
    Defense,
    Attack,
    Mode,
}

impl Grouping {
    fn key(self, h: &MetricsHeader) -> String {
        match self {
            Grouping::RunId => h.run_id.clone(),
            Grouping::Defense => h.defense.clone(),
            Grouping::Attack => h.attack.clone(),
            Grouping::Mode => h.mode.clone(),
        }
    }
}

pub const PANELS: [&str; 2] = ["main_accuracy", "backdoor_accuracy"];

fn panel_value(panel: &str, r: &MetricsRecord) -> Option<f64> {
    match panel {
        "main_accuracy" => r.main_accuracy,
        _ => r.backdoor_accuracy,
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Writes `<panel>.csv` into `out_dir` for every panel, with columns
/// `group, round, mean, std, n`. Rounds where no run of a group reported the
/// panel's value are left out.
pub fn export_plot_data(
    metrics_paths: &[PathBuf],
    grouping: Grouping,
    out_dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    if metrics_paths.is_empty() {
        return Err(CliError::Empty("metrics files"));
    }
    let mut groups: BTreeMap<String, Vec<Vec<MetricsRecord>>> = BTreeMap::new();
    for p in metrics_paths {
        let (header, records) = read_metrics(p)?;
        groups
            .entry(grouping.key(&header))
            .or_default()
            .push(records);
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut written = Vec::new();
    for panel in PANELS {
        let path = out_dir.join(format!("{panel}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["group", "round", "mean", "std", "n"])
            .map_err(|e| csv_error(&path, e))?;
        for (group, runs) in &groups {
            let rounds = runs.iter().map(Vec::len).max().unwrap_or(0);
            for round in 0..rounds {
                let values: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| r.get(round).and_then(|rec| panel_value(panel, rec)))
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&values);
                w.write_record([
                    group.clone(),
                    round.to_string(),
                    mean.to_string(),
                    std.to_string(),
                    values.len().to_string(),
                ])
                .map_err(|e| csv_error(&path, e))?;
            }
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e))
}
