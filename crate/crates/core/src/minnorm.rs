//! Minimum-norm points of convex and affine hulls of gradient sets.
//!
//! The convex-hull problem `min ‖Σ α_i g_i‖² s.t. α ∈ Δ` is the dual of the
//! common-descent-direction problem; its optimum is zero exactly when the set
//! is Pareto-stationary. It is solved with pairwise Frank-Wolfe on the
//! precomputed Gram matrix, finishing each iteration with an exact solve on
//! the current support whenever that solve stays feasible. Small problems on
//! which the iteration stalls are finished by checking every face.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grad::{DenseVector, GradientSet, SimplexWeights};

/// Solver limits for [`min_norm_point`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinNormConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MinNormConfig {
    fn default() -> Self {
        Self { max_iter: 250, tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinNormSolution {
    pub weights: SimplexWeights,
    /// `Σ α_i rows_i`, the min-norm element of the hull.
    pub point: DenseVector,
    pub norm: f64,
    pub iterations: usize,
    /// Squared norm of the iterate after initialization and after every iteration.
    pub history: Vec<f64>,
}

/// Closed-form minimum-norm point on the segment `[g1, g2]`.
pub fn two_task_min_norm(g1: &DenseVector, g2: &DenseVector) -> Result<MinNormSolution> {
    check_len(g1.len(), g2.len())?;
    let alpha2 = if g1 == g2 {
        0.5
    } else {
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in g1.iter().zip(g2.iter()) {
            let diff = a - b;
            num += diff * a;
            den += diff * diff;
        }
        if den > 0.0 {
            (num / den).clamp(0.0, 1.0)
        } else {
            0.5
        }
    };
    let alpha = vec![1.0 - alpha2, alpha2];
    let point: Vec<f64> = g1
        .iter()
        .zip(g2.iter())
        .map(|(a, b)| alpha[0] * a + alpha[1] * b)
        .collect();
    let point = DenseVector::new(point)?;
    let norm = point.norm();
    Ok(MinNormSolution {
        weights: SimplexWeights::normalized(alpha)?,
        point,
        norm,
        iterations: 1,
        history: vec![norm * norm],
    })
}

/// Minimum-norm element of the convex hull of the rows of `gs`.
pub fn min_norm_point(gs: &GradientSet, config: MinNormConfig) -> Result<MinNormSolution> {
    if config.max_iter == 0 || !(config.tol > 0.0) {
        return Err(Error::Validation("min-norm solver needs max_iter ≥ 1 and tol > 0".into()));
    }
    let gram = gs.gram();
    if gram.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("gradient Gram matrix is not finite".into()));
    }
    let m = gs.task_count();
    let (alpha, iterations, history) = solve_simplex(&gram, config);
    let weights = SimplexWeights::normalized(alpha)?;
    let point = weighted_sum(gs, weights.as_slice())?;
    let norm = point.norm();
    debug_assert_eq!(weights.len(), m);
    Ok(MinNormSolution { weights, point, norm, iterations, history })
}

fn quad(gram: &[Vec<f64>], alpha: &[f64]) -> (Vec<f64>, f64) {
    let v: Vec<f64> = gram
        .iter()
        .map(|row| row.iter().zip(alpha).map(|(g, a)| g * a).sum())
        .collect();
    let obj = v.iter().zip(alpha).map(|(x, a)| x * a).sum::<f64>().max(0.0);
    (v, obj)
}

/// Pairwise Frank-Wolfe with exact line search on `α ↦ αᵀ G α` over the simplex.
fn solve_simplex(gram: &[Vec<f64>], config: MinNormConfig) -> (Vec<f64>, usize, Vec<f64>) {
    let m = gram.len();
    let mut alpha = vec![1.0 / m as f64; m];
    let (mut v, mut obj) = quad(gram, &alpha);
    let mut history = vec![obj];
    if m == 1 {
        return (vec![1.0], 0, history);
    }
    let mut iterations = 0;
    while iterations < config.max_iter {
        if converged(&v, obj, config.tol) {
            break;
        }
        iterations += 1;

        let toward = argmin(&v);
        let away = (0..m)
            .filter(|&i| alpha[i] > 0.0)
            .max_by(|&a, &b| v[a].total_cmp(&v[b]))
            .expect("simplex iterate has positive mass");
        if toward == away {
            break;
        }
        let budget = alpha[away];
        let curvature = gram[toward][toward] + gram[away][away] - 2.0 * gram[toward][away];
        let slope = v[away] - v[toward];
        let step = if curvature > 0.0 { (slope / curvature).min(budget) } else { budget };
        if !(step > 0.0) {
            break;
        }
        let mut next = alpha.clone();
        next[toward] += step;
        if step >= budget {
            next[away] = 0.0;
        } else {
            next[away] -= step;
        }
        let (next_v, next_obj) = quad(gram, &next);
        if next_obj > obj {
            // rounding at the optimum
            break;
        }
        alpha = next;
        v = next_v;
        obj = next_obj;

        if let Some(polished) = polish_support(gram, &alpha) {
            let (pv, pobj) = quad(gram, &polished);
            if pobj <= obj {
                alpha = polished;
                v = pv;
                obj = pobj;
            }
        }
        history.push(obj);
    }
    if !converged(&v, obj, config.tol) && m <= FACE_SEARCH_MAX {
        if let Some(best) = best_face(gram) {
            let (_, bobj) = quad(gram, &best);
            if bobj < obj {
                alpha = best;
                history.push(bobj);
            }
        }
    }
    (alpha, iterations, history)
}

/// Largest task count for which a stalled solve falls back to [`best_face`].
const FACE_SEARCH_MAX: usize = 12;

/// Exact minimum over the simplex by checking the affine minimizer of every
/// face. The optimum lies in the relative interior of some face, where it
/// coincides with that face's affine minimizer.
fn best_face(gram: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = gram.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
        let beta = if support.len() == 1 {
            vec![1.0]
        } else {
            let sub = DMatrix::from_fn(support.len(), support.len(), |i, j| gram[support[i]][support[j]]);
            match affine_weights(&sub) {
                Some(b) if b.iter().all(|&x| x >= -1e-12) => b,
                _ => continue,
            }
        };
        let mut alpha = vec![0.0; m];
        for (k, &i) in support.iter().enumerate() {
            alpha[i] = beta[k].max(0.0);
        }
        let sum: f64 = alpha.iter().sum();
        if !(sum > 0.0) {
            continue;
        }
        alpha.iter_mut().for_each(|a| *a /= sum);
        let (_, obj) = quad(gram, &alpha);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, alpha));
        }
    }
    best.map(|(_, a)| a)
}

/// True once the norm of the iterate is provably within `tol` of the optimum.
///
/// The Frank-Wolfe gap `obj − min_t v_t` bounds `‖x‖² − ‖x*‖²`, hence
/// `‖x‖ − ‖x*‖ ≤ gap / ‖x‖`.
fn converged(v: &[f64], obj: f64, tol: f64) -> bool {
    let norm = obj.sqrt();
    if norm <= tol {
        return true;
    }
    let gap = obj - v[argmin(v)];
    gap <= tol * norm
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len())
        .min_by(|&a, &b| v[a].total_cmp(&v[b]))
        .expect("nonempty")
}

/// Exact affine minimizer restricted to the support of `alpha`, if it lies in the simplex.
fn polish_support(gram: &[Vec<f64>], alpha: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
    if support.len() < 2 {
        return None;
    }
    let sub = DMatrix::from_fn(support.len(), support.len(), |i, j| gram[support[i]][support[j]]);
    let beta = affine_weights(&sub)?;
    if beta.iter().any(|&b| b < -1e-14) {
        return None;
    }
    let mut out = vec![0.0; alpha.len()];
    for (k, &i) in support.iter().enumerate() {
        out[i] = beta[k].max(0.0);
    }
    let sum: f64 = out.iter().sum();
    if !(sum > 0.0) {
        return None;
    }
    out.iter_mut().for_each(|a| *a /= sum);
    Some(out)
}

/// Moore-Penrose inverse of a symmetric PSD matrix, dropping eigenvalues
/// below `1e-12` of the largest.
fn symmetric_pinv(m: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let eig = m.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    if !lmax.is_finite() {
        return None;
    }
    let cut = lmax * 1e-12;
    let mut out = DMatrix::zeros(n, n);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cut && l > 0.0 {
            let u = eig.eigenvectors.column(k);
            out += (u * u.transpose()) / l;
        }
    }
    Some(out)
}

/// Minimal-norm `α` with `Σα = 1` minimizing `αᵀ G α`.
///
/// Writes `α = 1/m + β` with `β ⟂ 1`; the least-norm minimizer over `β` is
/// `β = −(P G P)⁺ P G 1/m` with `P` the projector onto `1^⊥`.
fn affine_weights(gram: &DMatrix<f64>) -> Option<Vec<f64>> {
    let m = gram.nrows();
    let center = DVector::from_element(m, 1.0 / m as f64);
    let proj = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    let reduced = &proj * gram * &proj;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let rhs = &proj * (gram * &center);
    let beta = symmetric_pinv(reduced)? * rhs;
    let alpha = center - proj * beta;
    let alpha: Vec<f64> = alpha.iter().copied().collect();
    alpha.iter().all(|a| a.is_finite()).then_some(alpha)
}

/// Projection of the origin onto the affine hull of the rows.
///
/// Returns weights summing to one (sign unconstrained) and `Σ α_i rows_i`.
/// When the Gram system is singular the weight vector of least norm is returned.
pub fn affine_min_norm(gs: &GradientSet) -> Result<(Vec<f64>, DenseVector)> {
    let gram = gs.gram();
    if gram.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("gradient Gram matrix is not finite".into()));
    }
    let m = gs.task_count();
    let gram = DMatrix::from_fn(m, m, |i, j| gram[i][j]);
    let mut alpha = affine_weights(&gram)
        .ok_or_else(|| Error::Degenerate("affine min-norm system could not be solved".into()))?;
    // Pin the sum to one against rounding in the pseudo-inverse.
    let sum: f64 = alpha.iter().sum();
    if sum.abs() > 0.5 {
        alpha.iter_mut().for_each(|a| *a /= sum);
    }
    let point = weighted_sum(gs, &alpha)?;
    Ok((alpha, point))
}

/// `Σ w_i rows_i` without the descent sign flip.
pub(crate) fn weighted_sum(gs: &GradientSet, weights: &[f64]) -> Result<DenseVector> {
    check_len(gs.task_count(), weights.len())?;
    let mut acc = vec![0.0; gs.dim()];
    for (row, &w) in gs.rows().iter().zip(weights) {
        for (a, r) in acc.iter_mut().zip(row.iter()) {
            *a += w * r;
        }
    }
    DenseVector::new(acc)
}
