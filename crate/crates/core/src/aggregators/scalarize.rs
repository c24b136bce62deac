//! Fixed and randomized scalarizations: unitary, RLW, RGD and sign-agnostic masking.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{combine, neg_sum, AggregateUpdate, DenseVector, GradientSet, SimplexWeights, Weights};

/// `g = −Σ ∇L_i`.
pub fn unitary(gs: &GradientSet) -> Result<AggregateUpdate> {
    let direction = neg_sum(gs.dim(), gs.rows().iter().map(|r| r.as_slice()))?;
    Ok(AggregateUpdate {
        direction,
        weights: Some(Weights::Free(vec![1.0; gs.task_count()])),
        trace: (),
    })
}

/// Distribution RLW draws its per-step weights from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlwDistribution {
    /// Dirichlet with all concentrations 1, i.e. uniform on the simplex.
    #[default]
    Dirichlet,
    /// Standard normals mapped to the simplex with a softmax.
    Normal,
    /// Deterministic `1/m`; a control that turns RLW back into a fixed scalarization.
    Uniform,
}

/// Draws simplex weights from `dist`.
pub fn rlw_weights<R: Rng + ?Sized>(m: usize, dist: RlwDistribution, rng: &mut R) -> Result<SimplexWeights> {
    if m == 1 {
        return Ok(SimplexWeights::uniform(1));
    }
    let raw: Vec<f64> = match dist {
        RlwDistribution::Dirichlet => (0..m).map(|_| Exp1.sample(rng)).collect(),
        RlwDistribution::Normal => {
            let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            z.iter().map(|v| (v - top).exp()).collect()
        }
        RlwDistribution::Uniform => return Ok(SimplexWeights::uniform(m)),
    };
    SimplexWeights::normalized(raw)
}

/// Random loss weighting: `g = −mass · Σ w_i ∇L_i` with `w` drawn from `dist`.
///
/// `mass = 1` keeps the weights on the simplex; `mass = m` with the uniform
/// control reproduces the unitary direction.
pub fn rlw<R: Rng + ?Sized>(
    gs: &GradientSet,
    dist: RlwDistribution,
    mass: f64,
    rng: &mut R,
) -> Result<AggregateUpdate> {
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Validation(format!("RLW mass must be positive, got {mass}")));
    }
    let m = gs.task_count();
    if dist == RlwDistribution::Uniform && mass != 1.0 {
        let scaled = vec![mass / m as f64; m];
        let direction = combine(gs, &scaled)?;
        return Ok(AggregateUpdate { direction, weights: Some(Weights::Free(scaled)), trace: () });
    }
    let w = rlw_weights(m, dist, rng)?;
    if mass == 1.0 {
        let direction = combine(gs, w.as_slice())?;
        return Ok(AggregateUpdate { direction, weights: Some(Weights::Simplex(w)), trace: () });
    }
    let scaled: Vec<f64> = w.as_slice().iter().map(|x| x * mass).collect();
    let direction = combine(gs, &scaled)?;
    Ok(AggregateUpdate { direction, weights: Some(Weights::Free(scaled)), trace: () })
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("keep probability must lie in (0, 1], got {p}")))
    }
}

/// Random Grad Drop: each task's whole gradient is kept with probability `p`.
///
/// The trace holds the sampled per-task keep decisions.
pub fn rgd<R: Rng + ?Sized>(gs: &GradientSet, p: f64, rng: &mut R) -> Result<AggregateUpdate<Vec<bool>>> {
    check_probability(p)?;
    let keep: Vec<bool> = (0..gs.task_count()).map(|_| p >= 1.0 || rng.random::<f64>() < p).collect();
    let direction = neg_sum(
        gs.dim(),
        gs.rows().iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r.as_slice()),
    )?;
    let weights = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    Ok(AggregateUpdate { direction, weights: Some(Weights::Free(weights)), trace: keep })
}

/// Elementwise Bernoulli(`p`) masking of every task gradient, blind to signs.
///
/// The trace holds one keep mask per task.
pub fn sign_agnostic_graddrop<R: Rng + ?Sized>(
    gs: &GradientSet,
    p: f64,
    rng: &mut R,
) -> Result<AggregateUpdate<Vec<Vec<bool>>>> {
    check_probability(p)?;
    let d = gs.dim();
    let mut acc = vec![0.0; d];
    let mut masks = Vec::with_capacity(gs.task_count());
    for row in gs.rows() {
        let mask: Vec<bool> = (0..d).map(|_| p >= 1.0 || rng.random::<f64>() < p).collect();
        for ((a, r), &k) in acc.iter_mut().zip(row.iter()).zip(&mask) {
            if k {
                *a += r;
            }
        }
        masks.push(mask);
    }
    acc.iter_mut().for_each(|a| *a = -*a);
    Ok(AggregateUpdate { direction: DenseVector::new(acc)?, weights: None, trace: masks })
}
