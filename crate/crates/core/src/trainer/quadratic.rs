use serde::{Deserialize, Serialize};

use crate::aggregators::{aggregate, Method};
use crate::error::{check_len, Error, Result};
use crate::minnorm::{min_norm_point, MinNormConfig};
use crate::rng::{stream, Stream};
use crate::tasks::ConflictingQuadratics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub method: Method,
    pub lr: f64,
    pub steps: usize,
    /// Starting point; the origin when absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub qp: MinNormConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRun {
    pub theta: Vec<f64>,
    pub losses: Vec<f64>,
    /// `||sum_i grad L_i||` at the final point.
    pub summed_norm: f64,
    /// Min-norm element of the convex hull of the final gradients.
    pub convex_certificate: f64,
    /// `||sum_i grad L_i||` before every step.
    pub norm_history: Vec<f64>,
}

/// Plain gradient steps `theta += lr * g` on analytic quadratics, with `g`
/// from the configured aggregator.
pub fn train_quadratic(problem: &ConflictingQuadratics, cfg: &QuadraticConfig) -> Result<QuadraticRun> {
    cfg.method.validate()?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("lr must be positive".into()));
    }
    let mut theta = cfg.init.clone().unwrap_or_else(|| vec![0.0; problem.dim()]);
    check_len(problem.dim(), theta.len())?;
    let mut rng = stream(cfg.seed, Stream::Aggregator);
    let mut norm_history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps as u64 {
        let gs = problem.gradients(&theta)?;
        norm_history.push(summed_norm(&gs));
        let losses = problem.losses(&theta)?;
        let update = aggregate(&cfg.method, &gs, &losses, None, cfg.qp, &mut rng).map_err(|e| match e {
            Error::Degenerate(detail) | Error::Validation(detail) => Error::Divergence { step, detail },
            other => other,
        })?;
        theta.iter_mut().zip(update.direction.iter()).for_each(|(t, g)| *t += cfg.lr * g);
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "parameters left the finite range".into(),
            });
        }
    }
    let gs = problem.gradients(&theta)?;
    Ok(QuadraticRun {
        losses: problem.losses(&theta)?,
        summed_norm: summed_norm(&gs),
        convex_certificate: min_norm_point(&gs, cfg.qp)?.norm,
        norm_history,
        theta,
    })
}

fn summed_norm(gs: &crate::grad::GradientSet) -> f64 {
    (0..gs.dim())
        .map(|k| gs.rows().iter().map(|r| r[k]).sum::<f64>())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::make_conflicting_quadratics;

    fn cfg(method: Method) -> QuadraticConfig {
        QuadraticConfig {
            method,
            lr: 0.05,
            steps: 2000,
            init: Some(vec![3.0, 2.0]),
            seed: 0,
            qp: MinNormConfig::default(),
        }
    }

    #[test]
    fn unitary_reaches_the_closed_form_optimum() {
        let q = make_conflicting_quadratics(vec![1.0, 0.0], vec![-1.0, 0.5], 2.0).unwrap();
        let run = train_quadratic(&q, &cfg(Method::Unitary)).unwrap();
        let opt = q.unitary_optimum();
        for (a, b) in run.theta.iter().zip(&opt) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(run.summed_norm < 1e-5);
    }

    #[test]
    fn mgda_stops_on_the_pareto_segment() {
        let q = make_conflicting_quadratics(vec![1.0, 0.0], vec![-1.0, 0.5], 2.0).unwrap();
        let run = train_quadratic(&q, &cfg(Method::Mgda { rescale: false })).unwrap();
        assert!(run.convex_certificate <= 1e-6, "{}", run.convex_certificate);
        assert!(run.summed_norm > 1e-3);
    }

    #[test]
    fn single_task_methods_follow_plain_descent() {
        let q = ConflictingQuadratics::new(vec![vec![0.5, -1.0]], vec![1.5]).unwrap();
        let base = train_quadratic(&q, &cfg(Method::Unitary)).unwrap();
        for method in [
            Method::Imtl,
            Method::Pcgrad,
            Method::Mgda { rescale: false },
            Method::Graddrop { flip_indicator: false },
            Method::Rlw {
                distribution: Default::default(),
                mass: 1.0,
            },
            Method::Rgd { p: 1.0 },
        ] {
            let run = train_quadratic(&q, &cfg(method.clone())).unwrap();
            assert_eq!(run.theta, base.theta, "{method}");
        }
    }

    #[test]
    fn divergence_names_the_step() {
        let q = make_conflicting_quadratics(vec![1.0, 0.0], vec![-1.0, 0.0], 1.0).unwrap();
        let mut c = cfg(Method::Unitary);
        c.lr = 1e3;
        c.steps = 10_000;
        match train_quadratic(&q, &c) {
            Err(Error::Divergence { step, .. }) => assert!(step > 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
