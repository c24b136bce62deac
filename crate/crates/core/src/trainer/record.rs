use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-task loss on the full training split at the end of the epoch, dropout off.
    pub train_losses: Vec<f64>,
    pub total_loss: f64,
    /// Per-task validation metric, present on validated epochs.
    pub val_metrics: Option<Vec<f64>>,
    pub val_average: Option<f64>,
    /// Mean of the `||sum_i grad L_i||` samples taken during the epoch.
    pub update_norm: Option<f64>,
    /// Cumulative trunk backward passes.
    pub backwards: u64,
    /// Cumulative head backward passes.
    pub head_backwards: u64,
    /// Time spent computing and applying updates during the epoch.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub tasks: usize,
    /// Whether each task's validation metric is maximized (accuracy) or minimized (loss).
    pub maximize: Vec<bool>,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub test_metrics: Vec<f64>,
    pub test_average: f64,
    pub steps: u64,
    /// Steps whose shared update was exactly zero.
    pub stalls: u64,
    /// Steps where an IMTL-L log-scale hit its bound.
    pub imtl_clamps: u64,
}

/// Average of the task metrics with minimized metrics negated.
pub(crate) fn signed_average(metrics: &[f64], maximize: &[bool]) -> f64 {
    let sum: f64 = metrics
        .iter()
        .zip(maximize)
        .map(|(v, &up)| if up { *v } else { -*v })
        .sum();
    sum / metrics.len().max(1) as f64
}

/// Epoch with the best validation score; earliest wins ties. Accuracies count
/// upward and losses downward, so mixed suites compare on one scale.
pub fn select_model(epochs: &[EpochRecord], maximize: &[bool]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for e in epochs {
        if let Some(v) = &e.val_metrics {
            let score = signed_average(v, maximize);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, e.epoch));
            }
        }
    }
    best.map(|(_, epoch)| epoch)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn csv_header(&self) -> Vec<String> {
        let m = self.tasks;
        let mut h = vec!["epoch".to_string()];
        h.extend((1..=m).map(|i| format!("loss_task_{i}")));
        h.push("loss_total".into());
        h.extend((1..=m).map(|i| format!("val_task_{i}")));
        h.extend(["val_avg", "update_norm", "backwards", "seconds"].map(String::from));
        h
    }

    /// One CSV row per epoch. Unvalidated epochs leave the validation cells empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header()).map_err(csv_error)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string()];
            row.extend(e.train_losses.iter().map(f64::to_string));
            row.push(e.total_loss.to_string());
            match &e.val_metrics {
                Some(v) => row.extend(v.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(String::new(), self.tasks)),
            }
            row.push(opt(e.val_average));
            row.push(opt(e.update_norm));
            row.push(e.backwards.to_string());
            row.push(e.seconds.to_string());
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Per-epoch training times.
    pub fn epoch_seconds(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.seconds).collect()
    }

    pub fn total_backwards(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.backwards)
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}
