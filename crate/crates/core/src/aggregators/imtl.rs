//! IMTL: equal-cosine gradient aggregation (IMTL-G) and learned loss scales (IMTL-L).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grad::{combine, AggregateUpdate, DenseVector, GradientSet, Weights};
use crate::minnorm::affine_min_norm;

/// How the IMTL-G weights were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImtlRoute {
    /// Direct solve of the equal-cosine linear system.
    Direct,
    /// The system was rank deficient; weights recovered from the projection
    /// of the origin onto the affine hull of the normalized gradients.
    AffineProjection,
    /// The origin is in the affine hull of the normalized gradients but no
    /// weights summing to one reach it on the raw gradients. The update is
    /// zero and the weights are the raw combination `γ` with `Σ γ_i ∇L_i = 0`.
    Stationary,
    /// Neither route determined the weights; uniform weights were used.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImtlTrace {
    pub route: ImtlRoute,
    /// Tasks whose zero gradient was excluded from the solve.
    pub excluded: Vec<usize>,
}

const RANK_TOL: f64 = 1e-12;
/// Distance below which the origin counts as lying on the normalized affine hull.
const STATIONARY_TOL: f64 = 1e-10;

/// IMTL-G: `g = −Σ α_i ∇L_i`, `Σ α_i = 1`, with equal cosine between `g`
/// and every `∇L_i`. Rejects zero-norm rows.
pub fn imtl_g(gs: &GradientSet) -> Result<AggregateUpdate<ImtlTrace>> {
    if let Some(i) = gs.norms().iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("task {i} gradient has zero norm")));
    }
    let (alpha, route) = equal_cosine_weights(gs)?;
    finish(gs, alpha, route, Vec::new())
}

fn finish(gs: &GradientSet, alpha: Vec<f64>, route: ImtlRoute, excluded: Vec<usize>) -> Result<AggregateUpdate<ImtlTrace>> {
    let (direction, weights) = if route == ImtlRoute::Stationary {
        (DenseVector::zeros(gs.dim()), Weights::Free(alpha))
    } else {
        (combine(gs, &alpha)?, Weights::Affine(alpha))
    };
    Ok(AggregateUpdate {
        direction,
        weights: Some(weights),
        trace: ImtlTrace { route, excluded },
    })
}

/// IMTL-G that tolerates zero rows: they get `α_i = 0` and the remaining
/// tasks are solved on their own. All-zero input yields `g = 0`.
pub fn imtl_g_excluding_zero(gs: &GradientSet) -> Result<AggregateUpdate<ImtlTrace>> {
    let norms = gs.norms();
    let excluded: Vec<usize> = (0..norms.len()).filter(|&i| norms[i] == 0.0).collect();
    if excluded.is_empty() {
        return imtl_g(gs);
    }
    let m = gs.task_count();
    let kept: Vec<usize> = (0..m).filter(|i| !excluded.contains(i)).collect();
    if kept.is_empty() {
        return Ok(AggregateUpdate {
            direction: DenseVector::zeros(gs.dim()),
            weights: Some(Weights::Affine(vec![1.0 / m as f64; m])),
            trace: ImtlTrace { route: ImtlRoute::Uniform, excluded },
        });
    }
    let sub = GradientSet::new(kept.iter().map(|&i| gs.row(i).clone()).collect(), gs.space())?;
    let (sub_alpha, route) = equal_cosine_weights(&sub)?;
    let mut alpha = vec![0.0; m];
    for (k, &i) in kept.iter().enumerate() {
        alpha[i] = sub_alpha[k];
    }
    finish(gs, alpha, route, excluded)
}

fn equal_cosine_weights(gs: &GradientSet) -> Result<(Vec<f64>, ImtlRoute)> {
    let m = gs.task_count();
    if m == 1 {
        return Ok((vec![1.0], ImtlRoute::Direct));
    }
    let gram = gs.gram();
    if gram.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("gradient Gram matrix is not finite".into()));
    }
    let norms: Vec<f64> = (0..m).map(|i| gram[i][i].sqrt()).collect();
    // Row 0: Σ α = 1. Row i: Σ_k α_k ∇L_k · (u_0 − u_i) = 0.
    let system = DMatrix::from_fn(m, m, |i, k| {
        if i == 0 {
            1.0
        } else {
            gram[k][0] / norms[0] - gram[k][i] / norms[i]
        }
    });
    let mut rhs = DVector::zeros(m);
    rhs[0] = 1.0;

    let svd = system.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax.is_finite() && smin > RANK_TOL * smax {
        if let Some(alpha) = system.lu().solve(&rhs) {
            let alpha: Vec<f64> = alpha.iter().copied().collect();
            if alpha.iter().all(|a| a.is_finite()) {
                return Ok((alpha, ImtlRoute::Direct));
            }
        }
    }
    Ok(affine_route(gs, &norms))
}

/// Weights from the projection of 0 onto Aff{∇L_i/‖∇L_i‖}: with projection
/// weights `β`, the IMTL weights are `α_i ∝ β_i / ‖∇L_i‖`.
fn affine_route(gs: &GradientSet, norms: &[f64]) -> (Vec<f64>, ImtlRoute) {
    let m = gs.task_count();
    let uniform = (vec![1.0 / m as f64; m], ImtlRoute::Uniform);
    let Ok(unit) = gs.scaled_rows(&norms.iter().map(|n| 1.0 / n).collect::<Vec<_>>()) else {
        return uniform;
    };
    let Ok((beta, point)) = affine_min_norm(&unit) else {
        return uniform;
    };
    let raw: Vec<f64> = beta.iter().zip(norms).map(|(b, n)| b / n).collect();
    let total: f64 = raw.iter().sum();
    let scale: f64 = raw.iter().map(|r| r.abs()).sum();
    if !(total.abs() > 1e-12 * scale) {
        if point.norm() <= STATIONARY_TOL {
            return (raw, ImtlRoute::Stationary);
        }
        return uniform;
    }
    (raw.iter().map(|r| r / total).collect(), ImtlRoute::AffineProjection)
}

/// Learned log-scales `s` for IMTL-L, trained by gradient descent on
/// `Σ_i (e^{s_i} L_i − s_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaleState {
    pub s: Vec<f64>,
    pub step_size: f64,
}

/// Bound on `|s_i|`; beyond it `e^{s_i}` is treated as overflow.
pub const LOG_SCALE_LIMIT: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossScaleStep {
    pub state: LossScaleState,
    /// `e^{s_i}` at the state the step started from; multiply task losses by these.
    pub scales: Vec<f64>,
    /// Set when some `s_i` had to be clamped to `±LOG_SCALE_LIMIT`.
    pub clamped: bool,
}

impl LossScaleState {
    pub fn new(m: usize, step_size: f64) -> Result<Self> {
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::Validation(format!("IMTL-L step size must be positive, got {step_size}")));
        }
        Ok(Self { s: vec![0.0; m], step_size })
    }

    pub fn scales(&self) -> Vec<f64> {
        self.s.iter().map(|s| s.exp()).collect()
    }
}

/// One gradient step on the IMTL-L objective:
/// `s_i ← s_i − η (e^{s_i} L_i − 1)`.
pub fn imtl_l_step(state: &LossScaleState, losses: &[f64]) -> Result<LossScaleStep> {
    check_len(state.s.len(), losses.len())?;
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Validation(format!("non-finite task loss {l}")));
    }
    let scales = state.scales();
    let mut clamped = false;
    let s = state
        .s
        .iter()
        .zip(&scales)
        .zip(losses)
        .map(|((&s, &e), &l)| {
            let next = s - state.step_size * (e * l - 1.0);
            if !next.is_finite() || next.abs() > LOG_SCALE_LIMIT {
                clamped = true;
                if next.is_nan() {
                    s.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
                } else {
                    next.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
                }
            } else {
                next
            }
        })
        .collect();
    Ok(LossScaleStep { state: LossScaleState { s, step_size: state.step_size }, scales, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::cosine;
    use crate::rng;
    use rand::Rng as _;

    fn set(rows: &[&[f64]]) -> GradientSet {
        GradientSet::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn imtl_examples() {
        let out = imtl_g(&set(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let w = out.weights.unwrap();
        assert!((w.as_slice()[0] - 0.5).abs() < 1e-15 && (w.as_slice()[1] - 0.5).abs() < 1e-15);
        assert_eq!(out.direction.as_slice(), &[-0.5, -0.5]);

        // −2α1 = −(1 − α1) ⇒ α = (1/3, 2/3)
        let out = imtl_g(&set(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap();
        let w = out.weights.unwrap();
        assert!((w.as_slice()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.as_slice()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.direction[0] + 2.0 / 3.0).abs() < 1e-15 && (out.direction[1] + 2.0 / 3.0).abs() < 1e-15);

        let out = imtl_g(&set(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap();
        assert!(out.direction.norm() < 1e-15);
    }

    #[test]
    fn imtl_rejects_zero_rows_but_lenient_variant_excludes_them() {
        let gs = set(&[&[0.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(imtl_g(&gs), Err(Error::Degenerate(_))));
        let out = imtl_g_excluding_zero(&gs).unwrap();
        assert_eq!(out.trace.excluded, vec![0]);
        let w = out.weights.unwrap();
        assert_eq!(w.as_slice()[0], 0.0);
        assert!((w.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let zero = imtl_g_excluding_zero(&set(&[&[0.0], &[0.0]])).unwrap();
        assert!(zero.direction.is_zero());
    }

    #[test]
    fn overflowing_gradients_are_an_error() {
        let gs = set(&[&[1e200, 0.0], &[3.0, -1e200]]);
        assert!(matches!(imtl_g(&gs), Err(Error::Validation(_))));
    }

    #[test]
    fn origin_on_the_normalized_hull_only_stops() {
        // the rows share the offset (0, 1), so no weights summing to one cancel them,
        // while their normalized versions span the plane affinely
        let gs = set(&[&[1.0, 1.0], &[-1.0, 1.0], &[3.0, 1.0]]);
        let out = imtl_g(&gs).unwrap();
        assert_eq!(out.trace.route, ImtlRoute::Stationary);
        assert!(out.direction.is_zero());
        let Some(Weights::Free(gamma)) = out.weights else { panic!("expected free weights") };
        assert!(combine(&gs, &gamma).unwrap().norm() < 1e-12);
        assert!(gamma.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn parallel_rows_take_the_projection_route() {
        let out = imtl_g(&set(&[&[1.0, 0.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(out.trace.route, ImtlRoute::AffineProjection);
        let w = out.weights.unwrap();
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // every cosine is 1 either way
        let g = &out.direction;
        assert!(cosine(g, &set(&[&[-1.0, 0.0]]).row(0).clone()).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn equal_cosines_and_route_agreement_on_random_sets() {
        let mut rng = rng::seeded(21);
        for _ in 0..200 {
            let m = rng.random_range(2..=5);
            let d = rng.random_range(m..=m + 3);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) * rng.random_range(0.1..10.0)).collect())
                .collect();
            let gs = GradientSet::from_rows(rows).unwrap();
            let out = imtl_g(&gs).unwrap();
            assert_eq!(out.trace.route, ImtlRoute::Direct);
            let cos: Vec<f64> = gs.rows().iter().map(|r| cosine(&out.direction, &r.scaled(-1.0)).unwrap()).collect();
            for c in &cos {
                assert!((c - cos[0]).abs() < 1e-8, "{cos:?}");
            }
            let (alt, _) = affine_route(&gs, &gs.norms());
            for (a, b) in out.weights.unwrap().as_slice().iter().zip(&alt) {
                assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn loss_scale_examples() {
        let st = LossScaleState::new(1, 0.1).unwrap();
        let step = imtl_l_step(&st, &[1.0]).unwrap();
        assert_eq!(step.state.s, vec![0.0]);
        assert_eq!(step.scales, vec![1.0]);

        let step = imtl_l_step(&st, &[3.0]).unwrap();
        assert!((step.state.s[0] + 0.2).abs() < 1e-15);

        let fixed = LossScaleState { s: vec![-(2f64.ln())], step_size: 0.5 };
        let step = imtl_l_step(&fixed, &[2.0]).unwrap();
        assert!((step.state.s[0] - fixed.s[0]).abs() < 1e-15);
    }

    #[test]
    fn loss_scale_clamps_on_overflow() {
        let st = LossScaleState { s: vec![19.0, -19.9], step_size: 1.0 };
        let step = imtl_l_step(&st, &[1e3, 0.0]).unwrap();
        assert!(step.clamped);
        assert_eq!(step.state.s, vec![-20.0, -18.9]);
        let step = imtl_l_step(&LossScaleState { s: vec![0.0], step_size: 1.0 }, &[-50.0]).unwrap();
        assert!(step.clamped);
        assert_eq!(step.state.s, vec![20.0]);
        assert!(imtl_l_step(&st, &[f64::NAN, 1.0]).is_err());
        assert!(LossScaleState::new(2, 0.0).is_err());
    }

    #[test]
    fn imtl_l_reaches_fixed_point() {
        let mut st = LossScaleState::new(2, 0.2).unwrap();
        for _ in 0..500 {
            st = imtl_l_step(&st, &[2.0, 0.5]).unwrap().state;
        }
        assert!((st.s[0] + 2f64.ln()).abs() < 1e-9);
        assert!((st.s[1] - 2f64.ln()).abs() < 1e-9);
    }
}
