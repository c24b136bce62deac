//! Dense vectors and the per-task gradient set shared by every aggregator.
//!
//! Sign convention: every aggregator returns a *direction* `g` such that the
//! parameter update is `θ ← θ + η·g`. For plain summation that means
//! `g = −Σ ∇L_i`.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A finite vector of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite entry {} at index {pos}",
                values[pos]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn norm(&self) -> f64 {
        norm2(self)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// `c · self`.
    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| c * v).collect())
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Which space the gradient rows live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Gradients with respect to the shared parameters.
    #[default]
    Parameter,
    /// Gradients with respect to the shared representation (flattened batch × width).
    Representation,
}

/// `m ≥ 1` per-task gradients of common length `d ≥ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    rows: Vec<DenseVector>,
    space: Space,
}

impl GradientSet {
    pub fn new(rows: Vec<DenseVector>, space: Space) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Validation("gradient set needs at least one task".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Validation("gradient dimension must be positive".into()));
        }
        for row in &rows {
            check_len(dim, row.len())?;
        }
        Ok(Self { rows, space })
    }

    /// Parameter-space set from raw rows; validates finiteness and shape.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows_in(rows, Space::Parameter)
    }

    pub fn from_rows_in(rows: Vec<Vec<f64>>, space: Space) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(DenseVector::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, space)
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn rows(&self) -> &[DenseVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &DenseVector {
        &self.rows[i]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.rows.iter().map(norm2).collect()
    }

    /// Every row multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        self.map_rows(|_, row| row.scaled(c))
    }

    /// Row `i` multiplied by `factors[i]`.
    pub fn scaled_rows(&self, factors: &[f64]) -> Result<Self> {
        check_len(self.task_count(), factors.len())?;
        self.map_rows(|i, row| row.scaled(factors[i]))
    }

    fn map_rows(&self, f: impl Fn(usize, &DenseVector) -> DenseVector) -> Result<Self> {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| DenseVector::new(f(i, row).into_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, space: self.space })
    }

    /// Same rows, different permutation.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        check_len(self.task_count(), order.len())?;
        let rows = order.iter().map(|&i| self.rows[i].clone()).collect();
        Self::new(rows, self.space)
    }

    /// `m × m` matrix of pairwise dot products.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let m = self.task_count();
        let mut gram = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                let v = raw_dot(self.rows[i].as_slice(), self.rows[j].as_slice());
                gram[i][j] = v;
                gram[j][i] = v;
            }
        }
        gram
    }
}

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Validation("simplex weights need at least one entry".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return Err(Error::Validation(format!("simplex weight {a} is negative or non-finite")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Validation(format!("simplex weights sum to {sum}, not 1")));
        }
        Ok(Self(alpha))
    }

    /// Clamps tiny negatives to zero and renormalizes. Used on solver output
    /// where rounding may push an entry to −1e-17.
    pub(crate) fn normalized(mut alpha: Vec<f64>) -> Result<Self> {
        for a in &mut alpha {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
        let sum: f64 = alpha.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Degenerate("weights have no positive mass".into()));
        }
        for a in &mut alpha {
            *a /= sum;
        }
        Self::new(alpha)
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coefficients used to form an aggregate direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Weights {
    /// On the probability simplex (MGDA, RLW).
    Simplex(SimplexWeights),
    /// Sum to one, sign unconstrained (IMTL-G).
    Affine(Vec<f64>),
    /// Arbitrary per-task multipliers (unitary, RGD).
    Free(Vec<f64>),
}

impl Weights {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Weights::Simplex(w) => w.as_slice(),
            Weights::Affine(w) | Weights::Free(w) => w,
        }
    }
}

/// Descent direction plus the per-method record of how it was formed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateUpdate<T = ()> {
    pub direction: DenseVector,
    pub weights: Option<Weights>,
    pub trace: T,
}

impl<T> AggregateUpdate<T> {
    pub fn is_stalled(&self) -> bool {
        self.direction.is_zero()
    }

    pub fn without_trace(self) -> AggregateUpdate {
        AggregateUpdate { direction: self.direction, weights: self.weights, trace: () }
    }
}

fn raw_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(raw_dot(a.as_slice(), b.as_slice()))
}

/// Euclidean norm.
pub fn norm2(a: &DenseVector) -> f64 {
    slice_norm(a.as_slice())
}

pub(crate) fn slice_norm(a: &[f64]) -> f64 {
    raw_dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok((raw_dot(a.as_slice(), b.as_slice()) / (na * nb)).clamp(-1.0, 1.0))
}

/// `−Σ w_i · rows_i`.
pub fn combine(gs: &GradientSet, weights: &[f64]) -> Result<DenseVector> {
    check_len(gs.task_count(), weights.len())?;
    let mut acc = vec![0.0; gs.dim()];
    for (row, &w) in gs.rows().iter().zip(weights) {
        for (a, r) in acc.iter_mut().zip(row.iter()) {
            *a += w * r;
        }
    }
    negate_into(acc)
}

/// `−Σ rows_i`; the summation order matches [`combine`] with unit weights.
pub(crate) fn neg_sum<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<DenseVector> {
    let mut acc = vec![0.0; dim];
    for row in rows {
        for (a, r) in acc.iter_mut().zip(row) {
            *a += r;
        }
    }
    negate_into(acc)
}

fn negate_into(mut acc: Vec<f64>) -> Result<DenseVector> {
    for a in &mut acc {
        *a = -*a;
    }
    DenseVector::new(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dot(&v(&[1.0, 2.0]), &v(&[3.0, -1.0])).unwrap(), 1.0);
        assert_eq!(dot(&v(&[3.0, 4.0]), &v(&[3.0, 4.0])).unwrap(), 25.0);
        assert!(matches!(
            dot(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::Dimension { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm2(&v(&[3.0, 4.0])), 5.0);
        assert_eq!(norm2(&v(&[0.0, 0.0])), 0.0);
        assert_eq!(norm2(&v(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap(), -1.0);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn combine_examples() {
        let gs = GradientSet::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(combine(&gs, &[1.0, 1.0]).unwrap().as_slice(), &[-1.0, -1.0]);
        let gs = GradientSet::from_rows(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let out = combine(&gs, &[0.5, 0.5]).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
        let gs = GradientSet::from_rows(vec![vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = combine(&gs, &[1.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert!((out[0] + 2.0 / 3.0).abs() < 1e-15 && (out[1] + 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(combine(&gs, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(GradientSet::from_rows(vec![]).is_err());
        assert!(GradientSet::from_rows(vec![vec![]]).is_err());
        assert!(GradientSet::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![1.5, -0.5]).is_err());
        assert!(SimplexWeights::new(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn serde_rejects_non_finite_vectors() {
        let ok: DenseVector = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(ok.as_slice(), &[1.0, 2.0]);
        let gs = GradientSet::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        let text = serde_json::to_string(&gs).unwrap();
        assert_eq!(serde_json::from_str::<GradientSet>(&text).unwrap(), gs);
    }

    fn finite() -> impl Strategy<Value = f64> {
        -10.0..10.0f64
    }

    proptest! {
        #[test]
        fn combine_is_linear(
            rows in prop::collection::vec(prop::collection::vec(finite(), 3), 1..5),
            a in finite(), b in finite(),
            seed_w in prop::collection::vec((finite(), finite()), 5),
        ) {
            let m = rows.len();
            let gs = GradientSet::from_rows(rows).unwrap();
            let w1: Vec<f64> = seed_w.iter().take(m).map(|p| p.0).collect();
            let w2: Vec<f64> = seed_w.iter().take(m).map(|p| p.1).collect();
            let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let lhs = combine(&gs, &mixed).unwrap();
            let r1 = combine(&gs, &w1).unwrap();
            let r2 = combine(&gs, &w2).unwrap();
            for k in 0..gs.dim() {
                let rhs = a * r1[k] + b * r2[k];
                // relative to the magnitude of the summed terms
                let scale: f64 = gs.rows().iter().enumerate()
                    .map(|(i, r)| (a * w1[i]).abs().max((b * w2[i]).abs()) * r[k].abs())
                    .sum::<f64>()
                    .max(1.0);
                prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn cosine_stays_in_range(
            a in prop::collection::vec(-1e6..1e6f64, 4),
            b in prop::collection::vec(-1e6..1e6f64, 4),
        ) {
            let (a, b) = (DenseVector::new(a).unwrap(), DenseVector::new(b).unwrap());
            prop_assume!(norm2(&a) > 0.0 && norm2(&b) > 0.0);
            let c = cosine(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
