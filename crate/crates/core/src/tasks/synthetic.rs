use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grad::{DenseVector, GradientSet};
use crate::net::{Batch, LossKind, Targets};
use crate::rng::{stream, Rng, Stream};
use crate::tasks::{split_sizes, TaskInfo, TaskSuite};

/// Analytic losses `L_i(theta) = s_i * ||theta - c_i||^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictingQuadratics {
    pub centers: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
}

impl ConflictingQuadratics {
    pub fn new(centers: Vec<Vec<f64>>, scales: Vec<f64>) -> Result<Self> {
        check_len(centers.len(), scales.len())?;
        let d = centers.first().map(Vec::len).unwrap_or(0);
        if d == 0 {
            return Err(Error::Validation("quadratics need at least one task and d >= 1".into()));
        }
        for c in &centers {
            check_len(d, c.len())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("centers must be finite".into()));
            }
        }
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Validation("quadratic scales must be positive".into()));
        }
        Ok(ConflictingQuadratics { centers, scales })
    }

    pub fn task_count(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn losses(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), theta.len())?;
        Ok(self
            .centers
            .iter()
            .zip(&self.scales)
            .map(|(c, s)| s * theta.iter().zip(c).map(|(t, c)| (t - c) * (t - c)).sum::<f64>())
            .collect())
    }

    /// Row `i` is `2 s_i (theta - c_i)`.
    pub fn gradients(&self, theta: &[f64]) -> Result<GradientSet> {
        check_len(self.dim(), theta.len())?;
        let rows = self
            .centers
            .iter()
            .zip(&self.scales)
            .map(|(c, s)| DenseVector::new(theta.iter().zip(c).map(|(t, c)| 2.0 * s * (t - c)).collect()))
            .collect::<Result<Vec<_>>>()?;
        GradientSet::new(rows, Default::default())
    }

    /// Minimizer of the summed loss, `sum s_i c_i / sum s_i`.
    pub fn unitary_optimum(&self) -> Vec<f64> {
        let total: f64 = self.scales.iter().sum();
        (0..self.dim())
            .map(|k| self.centers.iter().zip(&self.scales).map(|(c, s)| s * c[k]).sum::<f64>() / total)
            .collect()
    }

    /// `d^T H d` for the Hessian of the summed loss, `H = 2 sum_i s_i I`.
    pub fn summed_curvature(&self, direction: &[f64]) -> f64 {
        2.0 * self.scales.iter().sum::<f64>() * direction.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Two quadratics `||theta - c1||^2` and `kappa ||theta - c2||^2`.
pub fn make_conflicting_quadratics(c1: Vec<f64>, c2: Vec<f64>, kappa: f64) -> Result<ConflictingQuadratics> {
    ConflictingQuadratics::new(vec![c1, c2], vec![1.0, kappa])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub tasks: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    pub separation: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_clusters_per_class")]
    pub clusters_per_class: usize,
}

fn default_clusters_per_class() -> usize {
    2
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            tasks: 4,
            classes: 3,
            input_dim: 8,
            samples: 1200,
            separation: 8.0,
            label_noise: 0.0,
            clusters_per_class: 2,
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian clusters shared by all tasks. Each task maps the clusters onto
/// its classes through its own random permutation, so tasks disagree about
/// which inputs belong together. Cluster centers are `separation * u` with
/// `u ~ N(0, I/d)`, and points scatter around them with unit variance.
///
/// With label noise `q`, each label is replaced by a uniformly drawn class
/// with probability `q`, which caps the achievable accuracy at `1 - q + q/k`.
pub fn make_blob_classification(cfg: &BlobConfig, seed: u64) -> Result<TaskSuite> {
    Ok(generate_blobs(cfg, seed)?.suite)
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct BlobDraw {
    pub suite: TaskSuite,
    /// Cluster of every sample, in train/val/test order.
    pub clusters: Vec<usize>,
    /// Clean class of each cluster, per task.
    pub maps: Vec<Vec<usize>>,
}

pub(crate) fn generate_blobs(cfg: &BlobConfig, seed: u64) -> Result<BlobDraw> {
    if cfg.tasks == 0 || cfg.classes < 2 || cfg.input_dim == 0 || cfg.clusters_per_class == 0 {
        return Err(Error::Validation("blob suite needs tasks >= 1, classes >= 2, input_dim >= 1".into()));
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) || !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(Error::Validation("separation must be finite and label noise in [0, 1]".into()));
    }
    let (n_train, n_val, _) = split_sizes(cfg.samples)?;
    let mut rng = stream(seed, Stream::Generator);
    let clusters = cfg.classes * cfg.clusters_per_class;
    let d = cfg.input_dim;
    let scale = cfg.separation / (d as f64).sqrt();
    let centers = Array2::from_shape_simple_fn((clusters, d), || scale * normal(&mut rng));
    let maps: Vec<Vec<usize>> = (0..cfg.tasks)
        .map(|_| {
            let mut perm: Vec<usize> = (0..clusters).collect();
            perm.shuffle(&mut rng);
            perm.into_iter().map(|p| p % cfg.classes).collect()
        })
        .collect();

    let n = cfg.samples;
    let mut inputs = Array2::zeros((n, d));
    let mut labels = vec![Vec::with_capacity(n); cfg.tasks];
    let mut drawn = Vec::with_capacity(n);
    for r in 0..n {
        let c = rng.random_range(0..clusters);
        drawn.push(c);
        for k in 0..d {
            inputs[[r, k]] = centers[[c, k]] + normal(&mut rng);
        }
        for (t, map) in maps.iter().enumerate() {
            let label = if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
                rng.random_range(0..cfg.classes)
            } else {
                map[c]
            };
            labels[t].push(label);
        }
    }
    let all = Batch::new(inputs, labels.into_iter().map(Targets::Classes).collect())?;
    let (train, val, test) = split_batch(&all, n_train, n_val);
    let info = (0..cfg.tasks)
        .map(|_| TaskInfo {
            loss: LossKind::CrossEntropy,
            classes: cfg.classes,
            scale: 1.0,
        })
        .collect();
    Ok(BlobDraw {
        suite: TaskSuite::new(format!("blobs-m{}-k{}", cfg.tasks, cfg.classes), info, train, val, test)?,
        clusters: drawn,
        maps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub ratio: f64,
    #[serde(default = "default_reg_samples")]
    pub samples: usize,
    #[serde(default = "default_reg_input")]
    pub input_dim: usize,
    #[serde(default = "default_reg_hidden")]
    pub teacher_hidden: usize,
}

fn default_reg_samples() -> usize {
    800
}
fn default_reg_input() -> usize {
    8
}
fn default_reg_hidden() -> usize {
    16
}

impl RegressionConfig {
    pub fn with_ratio(ratio: f64) -> Self {
        RegressionConfig {
            ratio,
            samples: default_reg_samples(),
            input_dim: default_reg_input(),
            teacher_hidden: default_reg_hidden(),
        }
    }
}

/// Two MSE tasks with random one-hidden-layer tanh teachers. Each target is
/// standardized to zero mean and unit variance, then the second is multiplied
/// by `sqrt(ratio)`, so its loss scale is `ratio` times the first.
pub fn make_scale_imbalanced_regression(cfg: &RegressionConfig, seed: u64) -> Result<TaskSuite> {
    if !(cfg.ratio > 0.0 && cfg.ratio.is_finite()) {
        return Err(Error::Validation(format!("scale ratio {} must be positive", cfg.ratio)));
    }
    if cfg.input_dim == 0 || cfg.teacher_hidden == 0 {
        return Err(Error::Validation("regression dimensions must be positive".into()));
    }
    let (n_train, n_val, _) = split_sizes(cfg.samples)?;
    let mut rng = stream(seed, Stream::Generator);
    let (n, d, h) = (cfg.samples, cfg.input_dim, cfg.teacher_hidden);
    let x = Array2::from_shape_simple_fn((n, d), || normal(&mut rng));
    let scales = [1.0, cfg.ratio.sqrt()];
    let mut targets = Vec::with_capacity(2);
    for s in scales {
        let a = Array2::from_shape_simple_fn((d, h), || normal(&mut rng) / (d as f64).sqrt());
        let b = Array1::from_shape_simple_fn(h, || normal(&mut rng) / (h as f64).sqrt());
        let y = x.dot(&a).mapv(f64::tanh).dot(&b);
        let mean = y.mean().unwrap_or(0.0);
        let sd = y.std(0.0);
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let y = y.mapv(|v| s * (v - mean) / sd).insert_axis(Axis(1));
        targets.push(Targets::Values(y));
    }
    let all = Batch::new(x, targets)?;
    let (train, val, test) = split_batch(&all, n_train, n_val);
    let info = scales
        .iter()
        .map(|&scale| TaskInfo {
            loss: LossKind::Mse,
            classes: 0,
            scale,
        })
        .collect();
    TaskSuite::new(format!("regression-ratio{}", cfg.ratio), info, train, val, test)
}

fn split_batch(all: &Batch, n_train: usize, n_val: usize) -> (Batch, Batch, Batch) {
    let n = all.len();
    let idx: Vec<usize> = (0..n).collect();
    (
        all.select(&idx[..n_train]),
        all.select(&idx[n_train..n_train + n_val]),
        all.select(&idx[n_train + n_val..]),
    )
}
