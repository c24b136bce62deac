//! Seeded property suites over the aggregators, the min-norm solver and the
//! diagnostics.
//!
//! Every property returns a [`PropertyOutcome`]; failures carry the first
//! offending gradient set so it can be replayed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::aggregators::{
    graddrop, graddrop_expectation, imtl_g, mgda, pcgrad, rgd, unitary, GradDropOptions, PCGradTrace,
};
use crate::diagnostics::{conflict_summary, quadratic_triad_report, stationarity_report, DEFAULT_TOLERANCE};
use crate::error::Result;
use crate::grad::{combine, cosine, slice_norm, AggregateUpdate, DenseVector, GradientSet};
use crate::minnorm::{affine_min_norm, min_norm_point, MinNormConfig};
use crate::rng::{stream, Rng, Stream};
use crate::tasks::make_conflicting_quadratics;

pub type PcgradFn = fn(&GradientSet, &mut Rng) -> Result<AggregateUpdate<PCGradTrace>>;

/// Implementations under test. Replaceable so that a deliberately broken
/// operator can be shown to fail.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub pcgrad: PcgradFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks {
            pcgrad: |gs, rng| pcgrad(gs, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Replaces every property's comparison tolerance when set. Certificate
    /// thresholds (the `1e-6` stationarity cut) are not affected.
    pub tolerance: Option<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { seed: 0, tolerance: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub case: usize,
    pub rows: Vec<Vec<f64>>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub tolerance: f64,
    /// Largest observed violation measure (meaning depends on the property).
    pub worst: f64,
    pub counterexample: Option<Counterexample>,
}

struct Check {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    worst: f64,
    failure: Option<Counterexample>,
}

impl Check {
    fn new(name: &'static str, default_tol: f64, cfg: &VerifyConfig) -> Self {
        Check {
            name,
            tolerance: cfg.tolerance.unwrap_or(default_tol),
            cases: 0,
            worst: 0.0,
            failure: None,
        }
    }

    /// Records one case whose violation is `err`; fails when `err > tolerance`.
    fn measure(&mut self, gs: &GradientSet, err: f64, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
        if (err > self.tolerance || err.is_nan()) && self.failure.is_none() {
            self.fail(gs, detail());
        }
    }

    fn require(&mut self, gs: &GradientSet, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok && self.failure.is_none() {
            self.fail(gs, detail());
        }
    }

    fn fail(&mut self, gs: &GradientSet, detail: String) {
        self.failure = Some(Counterexample {
            case: self.cases - 1,
            rows: gs.rows().iter().map(|r| r.as_slice().to_vec()).collect(),
            detail,
        });
    }

    fn finish(self) -> PropertyOutcome {
        PropertyOutcome {
            name: self.name.to_string(),
            passed: self.failure.is_none(),
            cases: self.cases,
            tolerance: self.tolerance,
            worst: self.worst,
            counterexample: self.failure,
        }
    }
}

/// Runs every suite in a fixed order.
pub fn run_all(cfg: &VerifyConfig, hooks: &Hooks) -> Result<Vec<PropertyOutcome>> {
    let suites: [fn(&VerifyConfig, &Hooks, &mut Rng) -> Result<PropertyOutcome>; 16] = [
        combine_is_linear,
        cosine_is_bounded,
        min_norm_matches_grid,
        frank_wolfe_descends,
        affine_point_is_orthogonal,
        convex_hull_above_affine_hull,
        mgda_certificate,
        imtl_equal_cosine,
        imtl_affine_certificate,
        pcgrad_rescaling_identity,
        pcgrad_two_task_closed_form,
        pcgrad_passthrough,
        graddrop_expectation_matches,
        rgd_zero_equivalence,
        certificates_nest,
        quadratic_curvature,
    ];
    let mut out = Vec::with_capacity(suites.len());
    for (k, suite) in suites.iter().enumerate() {
        let mut rng = stream(cfg.seed.wrapping_add(k as u64), Stream::Verify);
        out.push(suite(cfg, hooks, &mut rng)?);
    }
    Ok(out)
}

fn random_rows(rng: &mut Rng, m: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

/// Random sets, a third of them with the origin planted in the convex hull
/// and some with an exactly opposite pair of equal-length rows.
fn mixed_set(rng: &mut Rng, max_m: usize, max_d: usize) -> GradientSet {
    let m = rng.random_range(2..=max_m);
    let d = rng.random_range(1..=max_d);
    let mut rows = random_rows(rng, m, d, 1.0);
    match rng.random_range(0..3) {
        0 => {
            let w: Vec<f64> = (0..m - 1).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            rows[m - 1] = (0..d)
                .map(|k| -(0..m - 1).map(|i| w[i] * rows[i][k]).sum::<f64>() / total)
                .collect();
        }
        1 if m == 2 => rows[1] = rows[0].iter().map(|x| -x).collect(),
        _ => {}
    }
    GradientSet::from_rows(rows).expect("finite rows")
}

fn combine_is_linear(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("combine_linear", 1e-12, cfg);
    for _ in 0..200 {
        let (m, d) = (rng.random_range(1..=6), rng.random_range(1..=8));
        let gs = GradientSet::from_rows(random_rows(rng, m, d, 1.0))?;
        let w1: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = combine(&gs, &mixed)?;
        let (c1, c2) = (combine(&gs, &w1)?, combine(&gs, &w2)?);
        let err = (0..d)
            .map(|k| (lhs[k] - (a * c1[k] + b * c2[k])).abs())
            .fold(0.0, f64::max);
        c.measure(&gs, err, || format!("a={a}, b={b}, w1={w1:?}, w2={w2:?}"));
    }
    Ok(c.finish())
}

fn cosine_is_bounded(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("cosine_bounded", 0.0, cfg);
    for i in 0..10_000 {
        let d = rng.random_range(1..=6);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // every tenth pair is exactly parallel or antiparallel
        let b: Vec<f64> = if i % 10 == 0 {
            let s = if i % 20 == 0 { 3.0 } else { -0.5 };
            a.iter().map(|x| s * x).collect()
        } else {
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let gs = GradientSet::from_rows(vec![a, b])?;
        if gs.norms().contains(&0.0) {
            continue;
        }
        let v = cosine(gs.row(0), gs.row(1))?;
        c.measure(&gs, (v.abs() - 1.0).max(0.0), || format!("cosine {v}"));
    }
    Ok(c.finish())
}

/// Smallest norm over the simplex grid with the given step, for up to three rows.
pub fn simplex_grid_min_norm(gs: &GradientSet, step: f64) -> f64 {
    let n = (1.0 / step).round() as usize;
    let m = gs.task_count();
    let d = gs.dim();
    let rows: Vec<&[f64]> = gs.rows().iter().map(|r| r.as_slice()).collect();
    let mut best = f64::INFINITY;
    let mut point = vec![0.0; d];
    let mut eval = |w: &[f64]| {
        point.fill(0.0);
        for (row, &wi) in rows.iter().zip(w) {
            point.iter_mut().zip(*row).for_each(|(p, r)| *p += wi * r);
        }
        best = best.min(slice_norm(&point));
    };
    match m {
        1 => eval(&[1.0]),
        2 => (0..=n).for_each(|a| eval(&[a as f64 / n as f64, (n - a) as f64 / n as f64])),
        3 => {
            for a in 0..=n {
                for b in 0..=n - a {
                    let nf = n as f64;
                    eval(&[a as f64 / nf, b as f64 / nf, (n - a - b) as f64 / nf]);
                }
            }
        }
        _ => panic!("grid oracle supports at most three rows"),
    }
    best
}

fn min_norm_matches_grid(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("min_norm_grid", 1e-3, cfg);
    for _ in 0..100 {
        let (m, d) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let gs = GradientSet::from_rows(random_rows(rng, m, d, 1.0))?;
        let oracle = simplex_grid_min_norm(&gs, 1e-3);
        let s = min_norm_point(&gs, MinNormConfig::default())?;
        c.measure(&gs, (s.norm - oracle).abs(), || format!("solver {} grid {oracle}", s.norm));
    }
    Ok(c.finish())
}

fn frank_wolfe_descends(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("frank_wolfe_monotone", 0.0, cfg);
    for _ in 0..200 {
        let gs = mixed_set(rng, 6, 6);
        let s = min_norm_point(&gs, MinNormConfig::default())?;
        let rise = s.history.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        c.measure(&gs, rise, || format!("objective history {:?}", s.history));
    }
    Ok(c.finish())
}

fn affine_point_is_orthogonal(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("affine_orthogonality", 1e-8, cfg);
    for _ in 0..200 {
        let gs = mixed_set(rng, 5, 6);
        let (_, p) = affine_min_norm(&gs)?;
        let mut err: f64 = 0.0;
        for i in 0..gs.task_count() {
            for j in 0..i {
                let dot: f64 = (0..gs.dim()).map(|k| p[k] * (gs.row(i)[k] - gs.row(j)[k])).sum();
                err = err.max(dot.abs());
            }
        }
        c.measure(&gs, err, || format!("max |<p, g_i - g_j>| = {err}"));
    }
    Ok(c.finish())
}

fn convex_hull_above_affine_hull(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("convex_above_affine", 1e-12, cfg);
    for _ in 0..200 {
        let gs = mixed_set(rng, 5, 6);
        let convex = min_norm_point(&gs, MinNormConfig::default())?.norm;
        let affine = affine_min_norm(&gs)?.1.norm();
        c.measure(&gs, (affine - convex).max(0.0), || format!("convex {convex} affine {affine}"));
    }
    Ok(c.finish())
}

fn mgda_certificate(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("mgda_certificate", 0.0, cfg);
    for _ in 0..200 {
        let gs = mixed_set(rng, 4, 5);
        let g = mgda(&gs, MinNormConfig::default())?.direction.norm();
        let cert = min_norm_point(&gs, MinNormConfig::default())?.norm;
        c.require(&gs, (g <= DEFAULT_TOLERANCE) == (cert <= DEFAULT_TOLERANCE), || {
            format!("|g| {g} vs certificate {cert}")
        });
    }
    Ok(c.finish())
}

fn unit_rows(gs: &GradientSet) -> Result<GradientSet> {
    let norms = gs.norms();
    GradientSet::from_rows(
        gs.rows()
            .iter()
            .zip(&norms)
            .map(|(r, n)| r.iter().map(|x| x / n).collect())
            .collect(),
    )
}

fn imtl_equal_cosine(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("imtl_equal_cosine", 1e-8, cfg);
    let sum_tol = cfg.tolerance.unwrap_or(1e-10);
    for _ in 0..200 {
        let gs = mixed_set(rng, 5, 6);
        let out = imtl_g(&gs)?;
        let alpha = out.weights.as_ref().map(|w| w.as_slice().to_vec()).unwrap_or_default();
        let sum_err = (alpha.iter().sum::<f64>() - 1.0).abs();
        if out.direction.norm() <= DEFAULT_TOLERANCE {
            c.measure(&gs, if sum_err > sum_tol { f64::INFINITY } else { 0.0 }, || {
                format!("weights sum to {}", alpha.iter().sum::<f64>())
            });
            continue;
        }
        let cos: Vec<f64> = gs
            .rows()
            .iter()
            .map(|r| cosine(&out.direction, r))
            .collect::<Result<_>>()?;
        let spread = cos.iter().map(|x| (x - cos[0]).abs()).fold(0.0, f64::max);
        let err = if sum_err > sum_tol { f64::INFINITY } else { spread };
        c.measure(&gs, err, || format!("cosines {cos:?}, weight sum error {sum_err}"));
    }
    Ok(c.finish())
}

fn imtl_affine_certificate(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("imtl_affine_certificate", 0.0, cfg);
    for k in 0..100 {
        let gs = if k % 10 == 0 {
            let d = rng.random_range(1..=4);
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = slice_norm(&u);
            let u: Vec<f64> = u.iter().map(|x| x / n).collect();
            GradientSet::from_rows(vec![u.clone(), u.iter().map(|x| -x).collect()])?
        } else {
            mixed_set(rng, 4, 5)
        };
        let g = imtl_g(&gs)?.direction.norm();
        let cert = affine_min_norm(&unit_rows(&gs)?)?.1.norm();
        c.require(&gs, (g <= DEFAULT_TOLERANCE) == (cert <= DEFAULT_TOLERANCE), || {
            format!("|g| {g} vs affine certificate {cert}")
        });
    }
    Ok(c.finish())
}

fn pcgrad_rescaling_identity(cfg: &VerifyConfig, hooks: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("pcgrad_rescaling_identity", 1e-9, cfg);
    for _ in 0..500 {
        let (m, d) = (rng.random_range(2..=6), rng.random_range(1..=6));
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let s = rng.random_range(0.1..5.0);
                (0..d).map(|_| s * rng.random_range(-1.0..1.0)).collect()
            })
            .collect();
        let gs = GradientSet::from_rows(rows)?;
        let out = (hooks.pcgrad)(&gs, rng)?;
        let scale = out.trace.rescaling();
        let norms = gs.norms();
        let mut err: f64 = 0.0;
        for k in 0..d {
            let rebuilt: f64 = (0..m).map(|i| scale[i] * gs.row(i)[k]).sum();
            err = err.max((rebuilt + out.direction[k]).abs());
        }
        for j in 0..m {
            for i in (0..m).filter(|&i| i != j) {
                let dji = out.trace.coeffs[j][i];
                let over = (dji - norms[j] / norms[i]).max(0.0);
                err = err.max(over).max(-dji);
            }
        }
        c.measure(&gs, err, || format!("identity or bound violated by {err}"));
    }
    Ok(c.finish())
}

fn project_out(a: &[f64], b: &[f64]) -> Vec<f64> {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let bb: f64 = b.iter().map(|y| y * y).sum();
    if ab >= 0.0 || bb == 0.0 {
        return a.to_vec();
    }
    a.iter().zip(b).map(|(x, y)| x - ab / bb * y).collect()
}

fn pcgrad_two_task_closed_form(cfg: &VerifyConfig, hooks: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("pcgrad_two_tasks", 1e-12, cfg);
    for k in 0..200 {
        let d = rng.random_range(1..=5);
        let mut rows = random_rows(rng, 2, d, 1.0);
        if k % 4 == 0 {
            let s = rng.random_range(0.1..3.0);
            rows[1] = rows[0].iter().map(|x| -s * x).collect();
        }
        let gs = GradientSet::from_rows(rows)?;
        let a = (hooks.pcgrad)(&gs, rng)?;
        let b = (hooks.pcgrad)(&gs, rng)?;
        let g1 = project_out(gs.row(0).as_slice(), gs.row(1).as_slice());
        let g2 = project_out(gs.row(1).as_slice(), gs.row(0).as_slice());
        let mut err: f64 = if a.direction == b.direction { 0.0 } else { f64::INFINITY };
        for k in 0..d {
            err = err.max((a.direction[k] + g1[k] + g2[k]).abs());
        }
        c.measure(&gs, err, || format!("direction {:?}", a.direction.as_slice()));
    }
    Ok(c.finish())
}

fn pcgrad_passthrough(cfg: &VerifyConfig, hooks: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("pcgrad_passthrough", 0.0, cfg);
    for _ in 0..200 {
        let (m, d) = (rng.random_range(2..=6), rng.random_range(1..=6));
        // a shared positive orthant rules out conflicts
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let gs = GradientSet::from_rows(rows)?;
        let p = (hooks.pcgrad)(&gs, rng)?.direction;
        let u = unitary(&gs)?.direction;
        c.require(&gs, p == u, || format!("pcgrad {:?} vs unitary {:?}", p.as_slice(), u.as_slice()));
    }
    Ok(c.finish())
}

fn graddrop_expectation_matches(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("graddrop_expectation", 1e-12, cfg);
    let draws = 10_000;
    for k in 0..20 {
        let gs = mixed_set(rng, 5, 6);
        let options = GradDropOptions { flip_indicator: k % 2 == 1 };
        let expected = graddrop_expectation(&gs, options);
        let d = gs.dim();
        let (mut sum, mut sq) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..draws {
            let g = graddrop(&gs, options, rng)?.direction;
            for j in 0..d {
                let v = -g[j];
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let n = draws as f64;
        let mut worst: f64 = 0.0;
        for j in 0..d {
            let mean = sum[j] / n;
            let var = (sq[j] / n - mean * mean).max(0.0) * n / (n - 1.0);
            let excess = (mean - expected[j]).abs() - 3.0 * (var / n).sqrt();
            worst = worst.max(excess);
        }
        c.measure(&gs, worst, || format!("mean beyond 3 standard errors by {worst}"));
    }
    Ok(c.finish())
}

fn rgd_zero_equivalence(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("rgd_zero_equivalence", 0.0, cfg);
    for k in 0..40 {
        let (m, d) = (rng.random_range(1..=5), rng.random_range(1..=4));
        let mut rows = random_rows(rng, m, d, 1.0);
        if k % 2 == 0 {
            rows.iter_mut().for_each(|r| r.fill(0.0));
        }
        let gs = GradientSet::from_rows(rows)?;
        let all_zero = gs.norms().iter().all(|&n| n == 0.0);
        let p = rng.random_range(0.05..0.95);
        let mut always_zero = true;
        for _ in 0..1000 {
            always_zero &= rgd(&gs, p, rng)?.direction.is_zero();
        }
        c.require(&gs, always_zero == all_zero, || format!("p {p}: always zero {always_zero}"));
    }
    // one nonzero row: P(g != 0) at least p(1-p)^(m-1), one-sided binomial test at 0.01
    for m in 2..=5 {
        let p = 0.5;
        let mut rows = vec![vec![0.0; 3]; m];
        rows[0] = vec![1.0, -2.0, 0.5];
        let gs = GradientSet::from_rows(rows)?;
        let hits = (0..1000)
            .map(|_| rgd(&gs, p, rng).map(|u| !u.is_stalled()))
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&h| h)
            .count() as u64;
        let bound = p * (1.0 - p).powi(m as i32 - 1);
        let pval = Binomial::new(bound, 1000).expect("valid binomial").cdf(hits);
        c.require(&gs, pval >= 0.01, || format!("{hits}/1000 nonzero, bound {bound}, p-value {pval}"));
    }
    Ok(c.finish())
}

fn certificates_nest(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("certificate_nesting", 1e-9, cfg);
    for _ in 0..500 {
        let gs = mixed_set(rng, 5, 5);
        let r = stationarity_report(&gs, DEFAULT_TOLERANCE)?;
        let mut err: f64 = (r.convex_cert - r.joint_cert).max(0.0);
        if r.verdicts.unitary_stationary {
            err = err.max(r.convex_cert - r.tolerance);
        }
        if r.verdicts.pareto_stationary && r.excluded_rows.is_empty() {
            err = err.max(r.affine_cert - r.affine_tolerance(&gs.norms()));
        }
        let mut order: Vec<usize> = (0..gs.task_count()).collect();
        order.reverse();
        let p = stationarity_report(&gs.permuted(&order)?, DEFAULT_TOLERANCE)?;
        err = err
            .max((p.convex_cert - r.convex_cert).abs())
            .max((p.affine_cert - r.affine_cert).abs())
            .max((p.unitary_norm - r.unitary_norm).abs());
        for v in conflict_summary(&gs)?.cosines.iter().flatten() {
            err = err.max(v.abs() - 1.0);
        }
        c.measure(&gs, err, || format!("report {r:?}"));
    }
    Ok(c.finish())
}

fn quadratic_curvature(cfg: &VerifyConfig, _: &Hooks, rng: &mut Rng) -> Result<PropertyOutcome> {
    let mut c = Check::new("quadratic_curvature", 0.05, cfg);
    for _ in 0..20 {
        let c1: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c2: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let kappa = rng.random_range(1.0..50.0);
        let q = make_conflicting_quadratics(c1.clone(), c2.clone(), kappa)?;
        let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let exact = 2.0 * (1.0 + kappa);
        let gs = GradientSet::from_rows(vec![c1, c2])?;
        for eps in [1e-6, 1e-5, 1e-4] {
            let est = quadratic_triad_report(&q, &theta, eps)?.curvature.unwrap_or(f64::NAN);
            let rel = (est - exact).abs() / exact;
            c.measure(&gs, rel, || format!("kappa {kappa}, eps {eps}: {est} vs {exact}"));
        }
    }
    Ok(c.finish())
}

/// Failing outcomes as one JSON document.
pub fn counterexample_dump(outcomes: &[PropertyOutcome]) -> serde_json::Value {
    serde_json::Value::Array(
        outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| serde_json::to_value(o).expect("outcome serializes"))
            .collect(),
    )
}

/// Replays the rows of a counterexample.
pub fn counterexample_set(c: &Counterexample) -> Result<GradientSet> {
    GradientSet::new(
        c.rows.iter().cloned().map(DenseVector::new).collect::<Result<Vec<_>>>()?,
        Default::default(),
    )
}
