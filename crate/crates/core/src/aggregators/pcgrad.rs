//! PCGrad: project each task gradient onto the normal plane of the task
//! gradients it conflicts with, in random order, then sum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grad::{neg_sum, AggregateUpdate, GradientSet};

/// Effective rescaling performed by one PCGrad call.
///
/// `coeffs[j][i]` is the multiple of `∇L_i` added to task `j`'s projected
/// gradient, so that `−g = Σ_i (1 + Σ_{j≠i} coeffs[j][i]) ∇L_i`. The diagonal is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PCGradTrace {
    pub coeffs: Vec<Vec<f64>>,
    /// Projection order used for each task.
    pub orders: Vec<Vec<usize>>,
}

impl PCGradTrace {
    /// Per-task loss multipliers `1 + Σ_{j≠i} d_ji`.
    pub fn rescaling(&self) -> Vec<f64> {
        let m = self.coeffs.len();
        (0..m)
            .map(|i| 1.0 + (0..m).filter(|&j| j != i).map(|j| self.coeffs[j][i]).sum::<f64>())
            .collect()
    }
}

/// Relative size, per coordinate, below which a projected gradient counts as zero.
const ROUNDING: f64 = 8.0 * f64::EPSILON;

pub fn pcgrad<R: Rng + ?Sized>(gs: &GradientSet, rng: &mut R) -> Result<AggregateUpdate<PCGradTrace>> {
    let m = gs.task_count();
    let sq_norms: Vec<f64> = gs.rows().iter().map(|r| r.iter().map(|x| x * x).sum()).collect();
    let mut coeffs = vec![vec![0.0; m]; m];
    let mut orders = Vec::with_capacity(m);
    let mut projected = Vec::with_capacity(m);

    for i in 0..m {
        coeffs[i][i] = 1.0;
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.shuffle(rng);
        let mut g = gs.row(i).as_slice().to_vec();
        for &j in &order {
            if sq_norms[j] == 0.0 {
                continue;
            }
            let other = gs.row(j).as_slice();
            let overlap: f64 = g.iter().zip(other).map(|(a, b)| a * b).sum();
            if overlap < 0.0 {
                let c = -overlap / sq_norms[j];
                let before: f64 = g.iter().map(|a| a * a).sum();
                for (a, b) in g.iter_mut().zip(other) {
                    *a += c * b;
                }
                // an exactly antiparallel pair leaves only rounding noise
                let after: f64 = g.iter().map(|a| a * a).sum();
                if after <= ROUNDING * ROUNDING * g.len() as f64 * before {
                    g.fill(0.0);
                }
                coeffs[i][j] = c;
            }
        }
        orders.push(order);
        projected.push(g);
    }

    let direction = neg_sum(gs.dim(), projected.iter().map(|g| g.as_slice()))?;
    Ok(AggregateUpdate { direction, weights: None, trace: PCGradTrace { coeffs, orders } })
}
