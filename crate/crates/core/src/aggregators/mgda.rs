//! MGDA: step along the negated min-norm element of the gradients' convex hull.

use crate::error::{check_len, Error, Result};
use crate::grad::{combine, AggregateUpdate, GradientSet, Weights};
use crate::minnorm::{min_norm_point, MinNormConfig, MinNormSolution};

/// Rescales each row to `∇L_i / (‖∇L_i‖ · L_i)`, as the reference MGDA code does.
pub fn mgda_rescale(gs: &GradientSet, losses: &[f64]) -> Result<GradientSet> {
    check_len(gs.task_count(), losses.len())?;
    let norms = gs.norms();
    let mut factors = Vec::with_capacity(norms.len());
    for (i, (&n, &l)) in norms.iter().zip(losses).enumerate() {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Degenerate(format!("task {i} loss {l} is not positive")));
        }
        if n == 0.0 {
            return Err(Error::Degenerate(format!("task {i} gradient has zero norm")));
        }
        factors.push(1.0 / (n * l));
    }
    gs.scaled_rows(&factors)
}

/// Like [`mgda_rescale`] but leaves zero rows untouched and falls back to
/// norm-only scaling for tasks whose loss is not positive. Used inside training
/// loops, where an exactly-solved task must not abort the run.
pub fn mgda_rescale_lenient(gs: &GradientSet, losses: &[f64]) -> Result<GradientSet> {
    check_len(gs.task_count(), losses.len())?;
    let factors: Vec<f64> = gs
        .norms()
        .iter()
        .zip(losses)
        .map(|(&n, &l)| match (n > 0.0, l > 0.0 && l.is_finite()) {
            (false, _) => 1.0,
            (true, true) => 1.0 / (n * l),
            (true, false) => 1.0 / n,
        })
        .collect();
    gs.scaled_rows(&factors)
}

/// `g = −Σ α_i ∇L_i` with `α` the min-norm simplex weights.
pub fn mgda(gs: &GradientSet, config: MinNormConfig) -> Result<AggregateUpdate<MinNormSolution>> {
    let solution = min_norm_point(gs, config)?;
    let direction = combine(gs, solution.weights.as_slice())?;
    Ok(AggregateUpdate {
        direction,
        weights: Some(Weights::Simplex(solution.weights.clone())),
        trace: solution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> GradientSet {
        GradientSet::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn rescale_examples() {
        let out = mgda_rescale(&set(&[&[3.0, 4.0]]), &[2.0]).unwrap();
        assert!((out.row(0)[0] - 0.3).abs() < 1e-15 && (out.row(0)[1] - 0.4).abs() < 1e-15);
        let out = mgda_rescale(&set(&[&[1.0, 0.0]]), &[1.0]).unwrap();
        assert_eq!(out.row(0).as_slice(), &[1.0, 0.0]);
        // 2 / (‖(0, 2)‖ · 4) = 2 / 8
        let out = mgda_rescale(&set(&[&[0.0, 2.0]]), &[4.0]).unwrap();
        assert_eq!(out.row(0).as_slice(), &[0.0, 0.25]);
    }

    #[test]
    fn rescale_rejects_degenerate_rows() {
        assert!(matches!(mgda_rescale(&set(&[&[0.0, 0.0]]), &[1.0]), Err(Error::Degenerate(_))));
        assert!(matches!(mgda_rescale(&set(&[&[1.0, 0.0]]), &[0.0]), Err(Error::Degenerate(_))));
        assert!(matches!(mgda_rescale(&set(&[&[1.0, 0.0]]), &[-1.0]), Err(Error::Degenerate(_))));
        let lenient = mgda_rescale_lenient(&set(&[&[0.0, 0.0], &[0.0, 2.0]]), &[1.0, 0.0]).unwrap();
        assert_eq!(lenient.row(0).as_slice(), &[0.0, 0.0]);
        assert_eq!(lenient.row(1).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn mgda_examples() {
        let cfg = MinNormConfig::default();
        let out = mgda(&set(&[&[1.0, 0.0], &[0.0, 1.0]]), cfg).unwrap();
        assert_eq!(out.direction.as_slice(), &[-0.5, -0.5]);
        assert_eq!(out.weights.unwrap().as_slice(), &[0.5, 0.5]);

        let out = mgda(&set(&[&[1.0, 0.0], &[-1.0, 1.0], &[-1.0, -1.0]]), cfg).unwrap();
        assert!(out.direction.norm() < 1e-12);

        let out = mgda(&set(&[&[1.0, 0.0], &[-1.0, 0.0]]), cfg).unwrap();
        assert!(out.direction.is_zero());
    }

    #[test]
    fn mgda_weights_invariant_to_uniform_scaling() {
        let gs = set(&[&[1.0, 0.3, -0.2], &[-0.4, 1.0, 0.1], &[0.2, -0.5, 1.0]]);
        let a = mgda(&gs, MinNormConfig::default()).unwrap();
        let b = mgda(&gs.scaled(7.5).unwrap(), MinNormConfig::default()).unwrap();
        for (x, y) in a.weights.unwrap().as_slice().iter().zip(b.weights.unwrap().as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
