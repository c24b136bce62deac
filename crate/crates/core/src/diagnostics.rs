//! Stationarity certificates, conflict/curvature reports and under-training
//! curves.
//!
//! Four certificates are computed for a set of task gradients, from weakest to
//! strongest condition:
//!
//! * `affine_cert`: distance from the origin to the affine hull of the
//!   normalized nonzero gradients (IMTL fixed points);
//! * `convex_cert`: distance to their convex hull (Pareto stationarity, MGDA
//!   fixed points);
//! * `unitary_norm`: `‖Σ ∇L_i‖` (stationarity of the summed loss);
//! * `joint_cert`: `max_i ‖∇L_i‖` (joint minimum).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grad::{cosine, slice_norm, GradientSet};
use crate::minnorm::{affine_min_norm, min_norm_point, MinNormConfig};
use crate::net::{per_task_param_grads, Batch, BackwardCounter, DropoutMode, LossKind, MultiTaskModel};
use crate::rng::seeded;
use crate::tasks::ConflictingQuadratics;
use crate::trainer::RunRecord;

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub unitary_stationary: bool,
    pub pareto_stationary: bool,
    pub affine_stationary: bool,
    pub joint_minimum: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub unitary_norm: f64,
    pub convex_cert: f64,
    pub affine_cert: f64,
    pub joint_cert: f64,
    /// Convex-hull weights that attain `convex_cert`.
    pub convex_weights: Vec<f64>,
    /// Zero rows left out of the affine certificate.
    pub excluded_rows: Vec<usize>,
    pub tolerance: f64,
    pub verdicts: Verdicts,
}

impl StationarityReport {
    /// Tolerance at which a Pareto-stationary verdict carries over to the
    /// normalized affine certificate.
    ///
    /// If `‖Σ α_i g_i‖ ≤ τ` then rescaling `β_i ∝ α_i ‖g_i‖` gives a point of
    /// the normalized hull within `τ / Σ α_i ‖g_i‖`. Infinite when the convex
    /// weights sit entirely on zero rows.
    pub fn affine_tolerance(&self, norms: &[f64]) -> f64 {
        let mass: f64 = self.convex_weights.iter().zip(norms).map(|(a, n)| a * n).sum();
        if mass > 0.0 {
            self.tolerance / mass
        } else {
            f64::INFINITY
        }
    }
}

pub fn stationarity_report(gs: &GradientSet, tolerance: f64) -> Result<StationarityReport> {
    stationarity_report_with(gs, tolerance, MinNormConfig::default())
}

pub fn stationarity_report_with(gs: &GradientSet, tolerance: f64, qp: MinNormConfig) -> Result<StationarityReport> {
    if !(tolerance > 0.0) || tolerance.is_nan() {
        return Err(Error::Config(format!("tolerance {tolerance} must be positive")));
    }
    let norms = gs.norms();
    let joint_cert = norms.iter().copied().fold(0.0, f64::max);
    let unitary_norm = summed_norm(gs);
    let convex = min_norm_point(gs, qp)?;

    let excluded_rows: Vec<usize> = (0..gs.task_count()).filter(|&i| norms[i] == 0.0).collect();
    let unit_rows: Vec<Vec<f64>> = gs
        .rows()
        .iter()
        .zip(&norms)
        .filter(|(_, &n)| n > 0.0)
        .map(|(r, &n)| r.iter().map(|x| x / n).collect())
        .collect();
    let affine_cert = if unit_rows.is_empty() {
        0.0
    } else {
        let unit = GradientSet::from_rows_in(unit_rows, gs.space())?;
        affine_min_norm(&unit)?.1.norm()
    };

    Ok(StationarityReport {
        verdicts: Verdicts {
            unitary_stationary: unitary_norm <= tolerance,
            pareto_stationary: convex.norm <= tolerance,
            affine_stationary: affine_cert <= tolerance,
            joint_minimum: joint_cert <= tolerance,
        },
        unitary_norm,
        convex_cert: convex.norm,
        affine_cert,
        joint_cert,
        convex_weights: convex.weights.as_slice().to_vec(),
        excluded_rows,
        tolerance,
    })
}

/// `‖Σ_i rows_i‖`.
pub fn summed_norm(gs: &GradientSet) -> f64 {
    slice_norm(&summed(gs))
}

fn summed(gs: &GradientSet) -> Vec<f64> {
    let mut acc = vec![0.0; gs.dim()];
    for row in gs.rows() {
        acc.iter_mut().zip(row.iter()).for_each(|(a, r)| *a += r);
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriadReport {
    /// Pairwise cosines; entries involving a zero row are 0 off the diagonal.
    pub cosines: Vec<Vec<f64>>,
    /// `max_i ‖∇L_i‖ / min_j ‖∇L_j‖`; 1 when every row is zero, infinite when only some are.
    pub magnitude_ratio: f64,
    /// Directional second derivative of the summed loss along its own gradient.
    pub curvature: Option<f64>,
}

/// Cosines and magnitude ratio of a gradient set, without curvature.
pub fn conflict_summary(gs: &GradientSet) -> Result<TriadReport> {
    let m = gs.task_count();
    let mut cosines = vec![vec![0.0; m]; m];
    for i in 0..m {
        cosines[i][i] = 1.0;
        for j in i + 1..m {
            let c = match cosine(gs.row(i), gs.row(j)) {
                Ok(c) => c,
                Err(Error::Degenerate(_)) => 0.0,
                Err(e) => return Err(e),
            };
            cosines[i][j] = c;
            cosines[j][i] = c;
        }
    }
    let norms = gs.norms();
    let hi = norms.iter().copied().fold(0.0, f64::max);
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let magnitude_ratio = if hi == 0.0 { 1.0 } else { hi / lo };
    Ok(TriadReport {
        cosines,
        magnitude_ratio,
        curvature: None,
    })
}

/// Finite-difference curvature `dᵀ(∇L(θ+εd) − ∇L(θ))/ε` along `d = ∇L/‖∇L‖`,
/// where `grad` returns the summed gradient. `None` when the gradient at `θ` is zero.
pub fn directional_curvature<F>(theta: &[f64], eps: f64, mut grad: F) -> Result<Option<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let g0 = grad(theta)?;
    check_len(theta.len(), g0.len())?;
    let n = slice_norm(&g0);
    if n == 0.0 {
        return Ok(None);
    }
    let d: Vec<f64> = g0.iter().map(|x| x / n).collect();
    let shifted: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + eps * di).collect();
    let g1 = grad(&shifted)?;
    check_len(theta.len(), g1.len())?;
    let c = d.iter().zip(g1.iter().zip(&g0)).map(|(di, (a, b))| di * (a - b)).sum::<f64>() / eps;
    Ok(Some(c))
}

/// Conflict and curvature report on the shared parameters of a model, with
/// dropout off and no L2 term.
pub fn triad_report(model: &MultiTaskModel, batch: &Batch, kinds: &[LossKind], eps: f64) -> Result<TriadReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let grads = |m: &MultiTaskModel| {
        let mut counter = BackwardCounter::default();
        per_task_param_grads(m, batch, kinds, 0.0, DropoutMode::Eval, &mut seeded(0), &mut counter)
    };
    let gs = grads(model)?.trunk;
    let mut report = conflict_summary(&gs)?;
    let mut probe = model.clone();
    report.curvature = directional_curvature(&model.trunk_params(), eps, |theta| {
        probe.set_trunk_params(theta)?;
        Ok(summed(&grads(&probe)?.trunk))
    })?;
    Ok(report)
}

/// Same report for analytic quadratics at `theta`.
pub fn quadratic_triad_report(problem: &ConflictingQuadratics, theta: &[f64], eps: f64) -> Result<TriadReport> {
    let gs = problem.gradients(theta)?;
    let mut report = conflict_summary(&gs)?;
    report.curvature = directional_curvature(theta, eps, |t| Ok(summed(&problem.gradients(t)?)))?;
    Ok(report)
}

/// Per-epoch mean of `‖Σ ∇L_i‖` from a run record.
pub fn undertraining_curve(record: &RunRecord) -> Result<Vec<f64>> {
    record
        .epochs
        .iter()
        .map(|e| {
            e.update_norm
                .ok_or_else(|| Error::Validation(format!("epoch {} has no gradient-norm samples", e.epoch)))
        })
        .collect()
}

/// Means of consecutive chunks of per-step samples; the last chunk may be short.
pub fn chunked_means(samples: &[f64], chunk: usize) -> Result<Vec<f64>> {
    if chunk == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    Ok(samples
        .chunks(chunk)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

/// Writes `run_id,epoch,update_norm` rows for several runs.
pub fn write_curve_csv<W: Write>(out: W, curves: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "epoch", "update_norm"]).map_err(csv_error)?;
    for (id, curve) in curves {
        for (epoch, v) in curve.iter().enumerate() {
            w.write_record([id.clone(), epoch.to_string(), v.to_string()]).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one row per `(run id, epoch, report)`.
pub fn write_stationarity_csv<W: Write>(out: W, reports: &[(String, usize, StationarityReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run_id",
        "epoch",
        "unitary_norm",
        "convex_cert",
        "affine_cert",
        "joint_cert",
        "tolerance",
        "unitary_stationary",
        "pareto_stationary",
        "affine_stationary",
        "joint_minimum",
    ])
    .map_err(csv_error)?;
    for (id, epoch, r) in reports {
        let v = r.verdicts;
        w.write_record([
            id.clone(),
            epoch.to_string(),
            r.unitary_norm.to_string(),
            r.convex_cert.to_string(),
            r.affine_cert.to_string(),
            r.joint_cert.to_string(),
            r.tolerance.to_string(),
            v.unitary_stationary.to_string(),
            v.pareto_stationary.to_string(),
            v.affine_stationary.to_string(),
            v.joint_minimum.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    crate::trainer::csv_error(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tasks::{make_conflicting_quadratics, make_scale_imbalanced_regression, RegressionConfig};
    use crate::trainer::{build_model, TrainConfig};
    use crate::aggregators::Method;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn set(rows: &[&[f64]]) -> GradientSet {
        GradientSet::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    /// Brute-force convex min-norm over a simplex grid for three rows.
    fn grid_min_norm(gs: &GradientSet, step: f64) -> f64 {
        let n = (1.0 / step).round() as usize;
        let mut best = f64::INFINITY;
        for a in 0..=n {
            for b in 0..=n - a {
                let w = [a as f64 * step, b as f64 * step, (n - a - b) as f64 * step];
                let p: Vec<f64> = (0..gs.dim())
                    .map(|k| (0..3).map(|i| w[i] * gs.row(i).as_slice()[k]).sum())
                    .collect();
                best = best.min(slice_norm(&p));
            }
        }
        best
    }

    #[test]
    fn opposite_rows_are_pareto_stationary_only() {
        let r = stationarity_report(&set(&[&[1.0, 0.0], &[-1.0, 0.0]]), DEFAULT_TOLERANCE).unwrap();
        assert_eq!(r.unitary_norm, 0.0);
        assert!(r.convex_cert <= 1e-12);
        assert_eq!(r.joint_cert, 1.0);
        assert!(r.verdicts.pareto_stationary && !r.verdicts.joint_minimum);
        assert!(r.verdicts.affine_stationary);
    }

    #[test]
    fn three_rows_are_pareto_but_not_unitary_stationary() {
        let gs = set(&[&[1.0, 0.0], &[-1.0, 1.0], &[-1.0, -1.0]]);
        let r = stationarity_report(&gs, DEFAULT_TOLERANCE).unwrap();
        assert!((r.unitary_norm - 1.0).abs() < 1e-15);
        assert!(r.convex_cert <= 1e-6);
        assert!(grid_min_norm(&gs, 1e-3) <= 2e-3);
        assert!(r.verdicts.pareto_stationary && !r.verdicts.unitary_stationary);
    }

    #[test]
    fn zero_rows_give_zero_certificates() {
        let r = stationarity_report(&set(&[&[0.0, 0.0], &[0.0, 0.0]]), DEFAULT_TOLERANCE).unwrap();
        assert_eq!((r.unitary_norm, r.convex_cert, r.affine_cert, r.joint_cert), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.excluded_rows, vec![0, 1]);
        assert!(r.verdicts.joint_minimum);
    }

    #[test]
    fn bad_tolerance_is_rejected() {
        let gs = set(&[&[1.0]]);
        assert!(stationarity_report(&gs, 0.0).is_err());
        assert!(stationarity_report(&gs, f64::NAN).is_err());
    }

    fn random_set(rng: &mut Rng) -> GradientSet {
        use rand::Rng as _;
        let m = rng.random_range(2..=4);
        let d = rng.random_range(1..=4);
        let mut rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        match rng.random_range(0..4) {
            // origin inside the convex hull
            0 => {
                let w: Vec<f64> = (0..m - 1).map(|_| rng.random_range(0.1..1.0)).collect();
                rows[m - 1] = (0..d).map(|k| -(0..m - 1).map(|i| w[i] * rows[i][k]).sum::<f64>()).collect();
            }
            // all rows zero
            1 if rng.random_range(0..5) == 0 => rows.iter_mut().for_each(|r| r.fill(0.0)),
            // an exactly cancelling pair
            2 => rows[1] = rows[0].iter().map(|x| -2.0 * x).collect(),
            _ => {}
        }
        GradientSet::from_rows(rows).unwrap()
    }

    #[test]
    fn certificates_nest_on_random_sets() {
        let mut rng = seeded(17);
        let tau = DEFAULT_TOLERANCE;
        for _ in 0..500 {
            let gs = random_set(&mut rng);
            let r = stationarity_report(&gs, tau).unwrap();
            assert!(r.convex_cert <= r.joint_cert + 1e-12);
            assert!(r.convex_cert <= r.unitary_norm / gs.task_count() as f64 + 1e-9);
            if r.verdicts.joint_minimum {
                assert!(r.verdicts.pareto_stationary);
            }
            if r.verdicts.unitary_stationary {
                assert!(r.convex_cert <= tau);
            }
            if r.verdicts.pareto_stationary && r.excluded_rows.is_empty() {
                assert!(r.affine_cert <= r.affine_tolerance(&gs.norms()) + 1e-9, "{r:?}");
            }
            for c in conflict_summary(&gs).unwrap().cosines.iter().flatten() {
                assert!((-1.0..=1.0).contains(c));
            }
        }
    }

    proptest! {
        #[test]
        fn reports_ignore_row_order(seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let gs = random_set(&mut rng);
            let mut order: Vec<usize> = (0..gs.task_count()).collect();
            order.shuffle(&mut rng);
            let a = stationarity_report(&gs, DEFAULT_TOLERANCE).unwrap();
            let b = stationarity_report(&gs.permuted(&order).unwrap(), DEFAULT_TOLERANCE).unwrap();
            prop_assert!((a.unitary_norm - b.unitary_norm).abs() <= 1e-12);
            prop_assert!((a.convex_cert - b.convex_cert).abs() <= 1e-7);
            prop_assert!((a.affine_cert - b.affine_cert).abs() <= 1e-7);
            prop_assert_eq!(a.joint_cert, b.joint_cert);
            prop_assert_eq!(a.verdicts.joint_minimum, b.verdicts.joint_minimum);
        }
    }

    #[test]
    fn quadratic_curvature_matches_the_hessian() {
        for kappa in [1.0, 4.0, 25.0] {
            let q = make_conflicting_quadratics(vec![1.0, 0.0], vec![-1.0, 2.0], kappa).unwrap();
            let exact = 2.0 * (1.0 + kappa);
            for eps in [1e-6, 1e-5, 1e-4] {
                let r = quadratic_triad_report(&q, &[0.3, -0.7], eps).unwrap();
                let c = r.curvature.unwrap();
                assert!((c - exact).abs() <= 0.05 * exact, "kappa {kappa} eps {eps}: {c}");
            }
        }
    }

    #[test]
    fn curvature_is_absent_at_a_stationary_point() {
        let q = make_conflicting_quadratics(vec![1.0, 0.0], vec![-1.0, 0.0], 1.0).unwrap();
        let r = quadratic_triad_report(&q, &q.unitary_optimum(), 1e-5).unwrap();
        assert_eq!(r.curvature, None);
        assert!(r.cosines[0][1] <= -1.0 + 1e-12);
    }

    #[test]
    fn duplicate_tasks_have_unit_cosines() {
        let r = conflict_summary(&set(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert!(r.cosines.iter().flatten().all(|c| (c - 1.0).abs() < 1e-15));
        assert_eq!(r.magnitude_ratio, 1.0);
    }

    #[test]
    fn scale_imbalance_shows_in_the_ratio() {
        let suite = make_scale_imbalanced_regression(&RegressionConfig::with_ratio(100.0), 5).unwrap();
        let model = build_model(&suite, &TrainConfig::new(Method::Unitary)).unwrap();
        let batch = suite.train.select(&(0..128).collect::<Vec<_>>());
        let r = triad_report(&model, &batch, &suite.kinds(), 1e-5).unwrap();
        assert!(r.magnitude_ratio >= 3.0, "{}", r.magnitude_ratio);
        assert!(r.curvature.unwrap().is_finite());
    }

    #[test]
    fn curves_and_csv() {
        assert_eq!(chunked_means(&[0.0; 7], 3).unwrap(), vec![0.0; 3]);
        assert_eq!(chunked_means(&[1.0, 3.0, 5.0], 2).unwrap(), vec![2.0, 5.0]);
        assert!(chunked_means(&[1.0], 0).is_err());
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[("a".into(), vec![1.5, 0.5])]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "run_id,epoch,update_norm\na,0,1.5\na,1,0.5\n");
        let r = stationarity_report(&set(&[&[0.0]]), DEFAULT_TOLERANCE).unwrap();
        let mut buf = Vec::new();
        write_stationarity_csv(&mut buf, &[("b".into(), 3, r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "b,3,0,0,0,0,0.000001,true,true,true,true");
    }
}
