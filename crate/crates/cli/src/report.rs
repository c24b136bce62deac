use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{CliError, RunArtifact};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub group: String,
    pub runs: usize,
    pub mean: f64,
    /// `1.96 · sd / √n`; absent for a single run.
    pub ci_half_width: Option<f64>,
    /// Interquartile range of per-epoch wall time over all runs in the group.
    pub epoch_seconds_iqr: f64,
    pub total_backwards: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.group.len()).max().unwrap_or(0).max(6);
        let mut s = format!(
            "{:<width$}  {:>4}  {:>10}  {:>16}  {:>14}  {:>12}\n",
            "method", "n", "test_avg", "95% CI", "epoch_s IQR", "backwards"
        );
        for r in &self.rows {
            let ci = match r.ci_half_width {
                Some(h) => format!("±{h:.4}"),
                None => "n=1, CI n/a".into(),
            };
            let _ = writeln!(
                s,
                "{:<width$}  {:>4}  {:>10.4}  {:>16}  {:>14.6}  {:>12}",
                r.group, r.runs, r.mean, ci, r.epoch_seconds_iqr, r.total_backwards
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "runs", "test_avg", "ci_half_width", "epoch_seconds_iqr", "total_backwards"])
            .map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([
                r.group.clone(),
                r.runs.to_string(),
                r.mean.to_string(),
                r.ci_half_width.map(|h| h.to_string()).unwrap_or_default(),
                r.epoch_seconds_iqr.to_string(),
                r.total_backwards.to_string(),
            ])
            .map_err(csv_io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_io(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

/// Collects run artifacts from output directories (their `runs/` folder or
/// the directory itself) and individual JSON files.
pub fn load_artifacts(paths: &[PathBuf]) -> Result<Vec<RunArtifact>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let dir = if p.join("runs").is_dir() { p.join("runs") } else { p.clone() };
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    files.push(path);
                }
            }
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    files.sort();
    files.dedup();
    let mut out = Vec::new();
    for f in files {
        if let Some(a) = read_artifact(&f)? {
            out.push(a);
        }
    }
    Ok(out)
}

fn read_artifact(path: &Path) -> Result<Option<RunArtifact>, CliError> {
    let text = fs::read_to_string(path)?;
    // other JSON files (manifests, counterexamples) are skipped
    Ok(serde_json::from_str(&text).ok())
}

/// Per-group mean test metric with a normal-approximation 95% interval.
pub fn cmd_report(paths: &[PathBuf]) -> Result<ReportTable, CliError> {
    let artifacts = load_artifacts(paths)?;
    if artifacts.is_empty() {
        return Err(CliError::Usage("no run records found".into()));
    }
    Ok(summarize(&artifacts))
}

pub(crate) fn summarize(artifacts: &[RunArtifact]) -> ReportTable {
    let mut groups: BTreeMap<&str, Vec<&RunArtifact>> = BTreeMap::new();
    for a in artifacts {
        groups.entry(&a.group).or_default().push(a);
    }
    let rows = groups
        .into_iter()
        .map(|(group, runs)| {
            let mut values: Vec<f64> = runs.iter().map(|a| a.record.test_average).collect();
            values.sort_by(f64::total_cmp);
            let mut seconds: Vec<f64> = runs.iter().flat_map(|a| a.record.epoch_seconds()).collect();
            seconds.sort_by(f64::total_cmp);
            let (mean, half) = mean_ci(&values);
            ReportRow {
                group: group.to_string(),
                runs: runs.len(),
                mean,
                ci_half_width: half,
                epoch_seconds_iqr: quantile(&seconds, 0.75) - quantile(&seconds, 0.25),
                total_backwards: runs.iter().map(|a| a.record.total_backwards()).sum(),
            }
        })
        .collect();
    ReportTable { rows }
}

/// Mean and `1.96 · se` with the sample standard deviation.
pub fn mean_ci(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(1.96 * (var / n).sqrt()))
}

/// Linear-interpolation quantile of sorted data; 0 for empty input.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_statistics() {
        let (mean, half) = mean_ci(&[0.9, 0.9, 0.96]);
        assert!((mean - 0.92).abs() < 1e-12);
        assert!((half.unwrap() - 0.0392).abs() < 1e-12);
        assert_eq!(mean_ci(&[0.5, 0.5]), (0.5, Some(0.0)));
        assert_eq!(mean_ci(&[0.7]), (0.7, None));
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&v, 0.75), 4.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
        assert_eq!(quantile(&[], 0.5), 0.0);
    }
}
