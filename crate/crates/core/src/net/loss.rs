use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    L1,
}

impl LossKind {
    /// True when the validation metric for this loss is maximized (accuracy).
    pub fn metric_is_maximized(self) -> bool {
        matches!(self, LossKind::CrossEntropy)
    }
}

/// Labels for one task over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of these targets.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select(Axis(0), idx)),
        }
    }
}

fn check_shapes(preds: ArrayView2<f64>, targets: &Targets, kind: LossKind) -> Result<()> {
    check_len(preds.nrows(), targets.len())?;
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            if let Some(&bad) = c.iter().find(|&&c| c >= preds.ncols()) {
                return Err(Error::Validation(format!(
                    "class label {bad} out of range for {} logits",
                    preds.ncols()
                )));
            }
            Ok(())
        }
        (LossKind::Mse | LossKind::L1, Targets::Values(v)) => check_len(preds.ncols(), v.ncols()),
        _ => Err(Error::Validation(format!("{kind:?} loss does not accept these targets"))),
    }
}

/// Batch-mean loss. Cross-entropy takes logits and class indices; MSE and L1
/// sum over output dimensions and average over the batch.
pub fn task_loss(preds: ArrayView2<f64>, targets: &Targets, kind: LossKind) -> Result<f64> {
    Ok(task_loss_grad(preds, targets, kind)?.0)
}

/// Loss and its gradient with respect to `preds`.
pub fn task_loss_grad(preds: ArrayView2<f64>, targets: &Targets, kind: LossKind) -> Result<(f64, Array2<f64>)> {
    check_shapes(preds, targets, kind)?;
    let b = preds.nrows().max(1) as f64;
    let mut grad = Array2::zeros(preds.raw_dim());
    let mut loss = 0.0;
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(classes)) => {
            for (r, &c) in classes.iter().enumerate() {
                let row = preds.row(r);
                let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - top).exp()).sum();
                let log_z = top + sum.ln();
                loss += log_z - row[c];
                for (k, v) in row.iter().enumerate() {
                    grad[[r, k]] = (v - log_z).exp() / b;
                }
                grad[[r, c]] -= 1.0 / b;
            }
        }
        (LossKind::Mse, Targets::Values(y)) => {
            for ((g, p), t) in grad.iter_mut().zip(preds.iter()).zip(y.iter()) {
                let diff = p - t;
                loss += diff * diff;
                *g = 2.0 * diff / b;
            }
        }
        (LossKind::L1, Targets::Values(y)) => {
            for ((g, p), t) in grad.iter_mut().zip(preds.iter()).zip(y.iter()) {
                let diff = p - t;
                loss += diff.abs();
                *g = if diff > 0.0 {
                    1.0 / b
                } else if diff < 0.0 {
                    -1.0 / b
                } else {
                    0.0
                };
            }
        }
        _ => unreachable!("checked above"),
    }
    Ok((loss / b, grad))
}

/// Evaluation metric: accuracy for classification, the loss itself otherwise.
pub fn task_metric(preds: ArrayView2<f64>, targets: &Targets, kind: LossKind) -> Result<f64> {
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(classes)) => {
            check_shapes(preds, targets, kind)?;
            let correct = classes
                .iter()
                .enumerate()
                .filter(|(r, &c)| argmax(preds.row(*r).iter()) == c)
                .count();
            Ok(correct as f64 / classes.len().max(1) as f64)
        }
        _ => task_loss(preds, targets, kind),
    }
}

fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
