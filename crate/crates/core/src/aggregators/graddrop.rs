//! GradDrop: sign-purity-driven stochastic masking of task gradients.
//!
//! The purity of coordinate `j` is `p_j = ½(1 + Σ_i g_ij / Σ_i |g_ij|)`
//! (`½` when every entry is zero). A positive entry survives with probability
//! `p_j`, a negative entry with probability `1 − p_j`, so coordinates on which
//! the tasks agree keep their majority sign. `flip_indicator` swaps the two
//! comparisons, which is the literal reading of the printed update formula.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grad::{AggregateUpdate, DenseVector, GradientSet, Space};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradDropOptions {
    pub flip_indicator: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDropSample {
    /// Purity per coordinate of the aggregated vector.
    pub purity: DenseVector,
    /// Uniform draws, one vector per task.
    pub draws: Vec<DenseVector>,
    /// Keep decisions, one vector per task. Zero entries are never "kept".
    pub masks: Vec<Vec<bool>>,
}

/// Purity of the columns of `rows` (each of length `d`).
pub fn sign_purity<'a>(d: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut signed = vec![0.0; d];
    let mut abs = vec![0.0; d];
    for row in rows {
        for k in 0..d {
            signed[k] += row[k];
            abs[k] += row[k].abs();
        }
    }
    signed
        .iter()
        .zip(&abs)
        .map(|(&s, &a)| if a > 0.0 { (0.5 * (1.0 + s / a)).clamp(0.0, 1.0) } else { 0.5 })
        .collect()
}

fn keeps(entry: f64, u: f64, p: f64, flip: bool) -> bool {
    let (keep_pos, keep_neg) = if flip { (u > p, u < p) } else { (u < p, u > p) };
    (entry > 0.0 && keep_pos) || (entry < 0.0 && keep_neg)
}

/// Masks every row with purity `purity[k % purity.len()]` and returns `−Σ masked`.
fn mask_rows<R: Rng + ?Sized>(
    gs: &GradientSet,
    purity: Vec<f64>,
    options: GradDropOptions,
    rng: &mut R,
) -> Result<AggregateUpdate<GradDropSample>> {
    let d = gs.dim();
    let mut acc = vec![0.0; d];
    let mut draws = Vec::with_capacity(gs.task_count());
    let mut masks = Vec::with_capacity(gs.task_count());
    for row in gs.rows() {
        let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<bool> = (0..d)
            .map(|k| keeps(row[k], u[k], purity[k], options.flip_indicator))
            .collect();
        for k in 0..d {
            if mask[k] {
                acc[k] += row[k];
            }
        }
        draws.push(DenseVector::new(u)?);
        masks.push(mask);
    }
    acc.iter_mut().for_each(|a| *a = -*a);
    Ok(AggregateUpdate {
        direction: DenseVector::new(acc)?,
        weights: None,
        trace: GradDropSample { purity: DenseVector::new(purity)?, draws, masks },
    })
}

/// GradDrop on gradients taken directly in the aggregation space.
pub fn graddrop<R: Rng + ?Sized>(
    gs: &GradientSet,
    options: GradDropOptions,
    rng: &mut R,
) -> Result<AggregateUpdate<GradDropSample>> {
    let purity = sign_purity(gs.dim(), gs.rows().iter().map(|r| r.as_slice()));
    mask_rows(gs, purity, options, rng)
}

/// Expected value of `−g` under [`graddrop`], per coordinate.
pub fn graddrop_expectation(gs: &GradientSet, options: GradDropOptions) -> Vec<f64> {
    let d = gs.dim();
    let p = sign_purity(d, gs.rows().iter().map(|r| r.as_slice()));
    expectation_with(gs, &p, options)
}

fn expectation_with(gs: &GradientSet, p: &[f64], options: GradDropOptions) -> Vec<f64> {
    (0..gs.dim())
        .map(|k| {
            let (mut pos, mut neg) = (0.0, 0.0);
            for row in gs.rows() {
                if row[k] > 0.0 {
                    pos += row[k];
                } else {
                    neg += row[k];
                }
            }
            let pk = p[k];
            if options.flip_indicator {
                (1.0 - pk) * pos + pk * neg
            } else {
                pk * pos + (1.0 - pk) * neg
            }
        })
        .collect()
}

/// GradDrop on representation gradients laid out as `batch × width`.
///
/// Purity is computed per representation unit from
/// `Σ_batch sign(z) ⊙ ∇_z L_i` (with `sign(0) = +1`) and broadcast over the
/// batch; each entry of `∇_z L_i` is then masked by its own sign. The returned
/// direction lives in representation space and still has to be pulled back
/// through the trunk.
pub fn graddrop_repr<R: Rng + ?Sized>(
    gs: &GradientSet,
    activations: &DenseVector,
    width: usize,
    options: GradDropOptions,
    rng: &mut R,
) -> Result<AggregateUpdate<GradDropSample>> {
    check_len(gs.dim(), activations.len())?;
    if gs.space() != Space::Representation {
        return Err(Error::Validation("graddrop_repr needs representation-space gradients".into()));
    }
    if width == 0 || gs.dim() % width != 0 {
        return Err(Error::Dimension { expected: width.max(1), found: gs.dim() });
    }
    let p = repr_purity(gs, activations, width);
    let full: Vec<f64> = (0..gs.dim()).map(|k| p[k % width]).collect();
    mask_rows(gs, full, options, rng)
}

/// Expected `−g` of [`graddrop_repr`], in representation space.
pub fn graddrop_repr_expectation(
    gs: &GradientSet,
    activations: &DenseVector,
    width: usize,
    options: GradDropOptions,
) -> Result<Vec<f64>> {
    check_len(gs.dim(), activations.len())?;
    if width == 0 || gs.dim() % width != 0 {
        return Err(Error::Dimension { expected: width.max(1), found: gs.dim() });
    }
    let p = repr_purity(gs, activations, width);
    let full: Vec<f64> = (0..gs.dim()).map(|k| p[k % width]).collect();
    Ok(expectation_with(gs, &full, options))
}

fn repr_purity(gs: &GradientSet, activations: &DenseVector, width: usize) -> Vec<f64> {
    let batch = gs.dim() / width;
    let summed: Vec<Vec<f64>> = gs
        .rows()
        .iter()
        .map(|row| {
            let mut col = vec![0.0; width];
            for b in 0..batch {
                for k in 0..width {
                    let idx = b * width + k;
                    let sign = if activations[idx] < 0.0 { -1.0 } else { 1.0 };
                    col[k] += sign * row[idx];
                }
            }
            col
        })
        .collect();
    sign_purity(width, summed.iter().map(|c| c.as_slice()))
}
