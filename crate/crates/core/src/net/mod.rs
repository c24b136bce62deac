//! Shared-trunk multilayer perceptron with one head per task.
//!
//! Layers compute `Y = X W + b` with `W` stored as an `(in, out)` matrix.
//! Parameters flatten in a fixed order: layer index, then the weight matrix
//! row-major, then the bias. Trunk rows of a [`GradientSet`] and the flat
//! head gradients all use this order.
//!
//! Trunk layers apply affine, activation, then inverted dropout. The trunk
//! output `z` is the shared representation. Head layers apply the activation
//! on hidden layers only; the final head layer is linear.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grad::{DenseVector, GradientSet, Space};
use crate::rng::Rng;

pub use loss::{task_loss, task_loss_grad, task_metric, LossKind, Targets};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    /// No nonlinearity.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    // derivative expressed through the pre-activation
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        check_len(weight.ncols(), bias.len())?;
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("layer parameters must be finite".into()));
        }
        Ok(Dense {
            weight: weight.as_standard_layout().into_owned(),
            bias,
        })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(n: usize) -> Self {
        Dense {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Dense { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Layer sizes used by [`MultiTaskModel::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Trunk widths; the last one is the representation width.
    pub trunk: Vec<usize>,
    /// Hidden widths inside every head. Empty gives a single affine head.
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    /// Output width of each task head.
    pub outputs: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Dropout probability applied after every trunk layer.
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Cached trunk activations from one forward pass.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Scaled keep masks (0 or 1/(1-p)) per trunk layer, `None` when inactive.
    pub masks: Vec<Option<Array2<f64>>>,
    /// Shared representation, `b x r`.
    pub z: Array2<f64>,
}

impl TrunkCache {
    pub fn batch_size(&self) -> usize {
        self.z.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Inputs and per-task targets for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Vec<Targets>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Vec<Targets>) -> Result<Self> {
        for t in &targets {
            check_len(inputs.nrows(), t.len())?;
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_count(&self) -> usize {
        self.targets.len()
    }

    /// Rows `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.iter().map(|t| t.select(idx)).collect(),
        }
    }
}

/// Number of backward passes performed, split by where they ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardCounter {
    pub trunk: u64,
    pub head: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskModel {
    trunk: Vec<Dense>,
    heads: Vec<Vec<Dense>>,
    activation: Activation,
    dropout: Vec<f64>,
}

impl MultiTaskModel {
    pub fn new(trunk: Vec<Dense>, heads: Vec<Vec<Dense>>, activation: Activation, dropout: Vec<f64>) -> Result<Self> {
        if trunk.is_empty() {
            return Err(Error::Validation("trunk needs at least one layer".into()));
        }
        if heads.is_empty() || heads.iter().any(|h| h.is_empty()) {
            return Err(Error::Validation("every task needs a head with at least one layer".into()));
        }
        check_len(trunk.len(), dropout.len())?;
        if let Some(p) = dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Validation(format!("dropout probability {p} outside [0, 1)")));
        }
        for pair in trunk.windows(2) {
            check_len(pair[0].output_dim(), pair[1].input_dim())?;
        }
        let r = trunk.last().map(Dense::output_dim).unwrap_or(0);
        for head in &heads {
            check_len(r, head[0].input_dim())?;
            for pair in head.windows(2) {
                check_len(pair[0].output_dim(), pair[1].input_dim())?;
            }
        }
        let model = MultiTaskModel {
            trunk,
            heads,
            activation,
            dropout,
        };
        if !model.is_finite() {
            return Err(Error::Validation("model parameters must be finite".into()));
        }
        Ok(model)
    }

    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        if spec.trunk.is_empty() || spec.outputs.is_empty() {
            return Err(Error::Validation("model needs trunk layers and at least one task".into()));
        }
        if spec.input_dim == 0 || spec.trunk.iter().chain(&spec.head_hidden).chain(&spec.outputs).any(|&w| w == 0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        let mut trunk = Vec::with_capacity(spec.trunk.len());
        let mut width = spec.input_dim;
        for &w in &spec.trunk {
            trunk.push(Dense::init(width, w, rng));
            width = w;
        }
        let r = width;
        let heads = spec
            .outputs
            .iter()
            .map(|&out| {
                let mut layers = Vec::new();
                let mut width = r;
                for &w in spec.head_hidden.iter().chain(std::iter::once(&out)) {
                    layers.push(Dense::init(width, w, rng));
                    width = w;
                }
                layers
            })
            .collect();
        MultiTaskModel::new(trunk, heads, spec.activation, vec![spec.dropout; spec.trunk.len()])
    }

    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].input_dim()
    }

    /// Width of the shared representation `z`.
    pub fn repr_dim(&self) -> usize {
        self.trunk.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn output_dim(&self, task: usize) -> usize {
        self.heads[task].last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout(&self) -> &[f64] {
        &self.dropout
    }

    pub fn trunk_layers(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn head_layers(&self, task: usize) -> &[Dense] {
        &self.heads[task]
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.iter().map(Dense::param_count).sum()
    }

    pub fn head_param_count(&self, task: usize) -> usize {
        self.heads[task].iter().map(Dense::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + (0..self.task_count()).map(|i| self.head_param_count(i)).sum::<usize>()
    }

    pub fn trunk_params(&self) -> Vec<f64> {
        self.trunk.iter().flat_map(Dense::params).copied().collect()
    }

    pub fn head_params(&self, task: usize) -> Vec<f64> {
        self.heads[task].iter().flat_map(Dense::params).copied().collect()
    }

    pub fn trunk_params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.trunk.iter_mut().flat_map(Dense::params_mut)
    }

    pub fn head_params_mut(&mut self, task: usize) -> impl Iterator<Item = &mut f64> {
        self.heads[task].iter_mut().flat_map(Dense::params_mut)
    }

    pub fn set_trunk_params(&mut self, values: &[f64]) -> Result<()> {
        check_len(self.trunk_param_count(), values.len())?;
        self.trunk_params_mut().zip(values).for_each(|(p, v)| *p = *v);
        Ok(())
    }

    pub fn set_head_params(&mut self, task: usize, values: &[f64]) -> Result<()> {
        check_len(self.head_param_count(task), values.len())?;
        self.head_params_mut(task).zip(values).for_each(|(p, v)| *p = *v);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.trunk
            .iter()
            .chain(self.heads.iter().flatten())
            .all(|l| l.params().all(|v| v.is_finite()))
    }

    /// Trunk forward. Train mode samples fresh dropout masks from `rng`.
    pub fn forward_trunk(&self, x: ArrayView2<f64>, mode: DropoutMode, rng: &mut Rng) -> Result<TrunkCache> {
        check_len(self.input_dim(), x.ncols())?;
        let mut masks = Vec::with_capacity(self.trunk.len());
        for (layer, &p) in self.trunk.iter().zip(&self.dropout) {
            let active = mode == DropoutMode::Train && p > 0.0;
            masks.push(active.then(|| {
                let keep = 1.0 / (1.0 - p);
                Array2::from_shape_simple_fn((x.nrows(), layer.output_dim()), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                })
            }));
        }
        self.forward_trunk_masked(x, &masks)
    }

    /// Trunk forward with given dropout masks, one per layer.
    pub fn forward_trunk_masked(&self, x: ArrayView2<f64>, masks: &[Option<Array2<f64>>]) -> Result<TrunkCache> {
        check_len(self.input_dim(), x.ncols())?;
        check_len(self.trunk.len(), masks.len())?;
        let mut inputs = Vec::with_capacity(self.trunk.len());
        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut a = x.to_owned();
        for (layer, mask) in self.trunk.iter().zip(masks) {
            let p = layer.forward(a.view());
            let mut out = p.mapv(|v| self.activation.apply(v));
            if let Some(mask) = mask {
                if mask.dim() != out.dim() {
                    return Err(Error::Dimension {
                        expected: out.len(),
                        found: mask.len(),
                    });
                }
                out *= mask;
            }
            inputs.push(a);
            pre.push(p);
            a = out;
        }
        Ok(TrunkCache {
            inputs,
            pre,
            masks: masks.to_vec(),
            z: a,
        })
    }

    pub fn forward_head(&self, task: usize, z: ArrayView2<f64>) -> Result<HeadCache> {
        self.check_task(task)?;
        check_len(self.repr_dim(), z.ncols())?;
        let layers = &self.heads[task];
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut a = z.to_owned();
        for (k, layer) in layers.iter().enumerate() {
            let p = layer.forward(a.view());
            let out = if k + 1 == layers.len() {
                p.clone()
            } else {
                p.mapv(|v| self.activation.apply(v))
            };
            inputs.push(a);
            pre.push(p);
            a = out;
        }
        Ok(HeadCache { inputs, pre, output: a })
    }

    /// Predictions of task `task` together with the trunk cache.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        task: usize,
        mode: DropoutMode,
        rng: &mut Rng,
    ) -> Result<(Array2<f64>, TrunkCache)> {
        let trunk = self.forward_trunk(x, mode, rng)?;
        let head = self.forward_head(task, trunk.z.view())?;
        Ok((head.output, trunk))
    }

    /// Eval-mode predictions of every task.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let trunk = self.forward_trunk_masked(x, &vec![None; self.trunk.len()])?;
        (0..self.task_count())
            .map(|i| Ok(self.forward_head(i, trunk.z.view())?.output))
            .collect()
    }

    /// Head backward for cotangent `dout`; returns the flat head gradient and `dL/dz`.
    pub fn backward_head(&self, task: usize, cache: &HeadCache, dout: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        self.check_task(task)?;
        if dout.dim() != cache.output.dim() {
            return Err(Error::Dimension {
                expected: cache.output.len(),
                found: dout.len(),
            });
        }
        let layers = &self.heads[task];
        let mut per_layer = vec![Vec::new(); layers.len()];
        let mut d = dout.to_owned();
        for k in (0..layers.len()).rev() {
            if k + 1 != layers.len() {
                d.zip_mut_with(&cache.pre[k], |g, &p| *g *= self.activation.derivative(p));
            }
            per_layer[k] = layer_grad(&cache.inputs[k], &d);
            d = d.dot(&layers[k].weight.t());
        }
        Ok((per_layer.concat(), d))
    }

    /// Trunk backward for cotangent `dz` on the representation.
    pub fn backward_trunk(&self, cache: &TrunkCache, dz: ArrayView2<f64>) -> Result<Vec<f64>> {
        if dz.dim() != cache.z.dim() {
            return Err(Error::Dimension {
                expected: cache.z.len(),
                found: dz.len(),
            });
        }
        let mut per_layer = vec![Vec::new(); self.trunk.len()];
        let mut d = dz.to_owned();
        for k in (0..self.trunk.len()).rev() {
            if let Some(mask) = &cache.masks[k] {
                d *= mask;
            }
            d.zip_mut_with(&cache.pre[k], |g, &p| *g *= self.activation.derivative(p));
            per_layer[k] = layer_grad(&cache.inputs[k], &d);
            if k > 0 {
                d = d.dot(&self.trunk[k].weight.t());
            }
        }
        Ok(per_layer.concat())
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task < self.task_count() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "task index {task} out of range for {} tasks",
                self.task_count()
            )))
        }
    }

    /// Forward through the trunk and every head, then one head backward per
    /// task. The trunk is left for the caller to differentiate.
    pub fn task_pass(
        &self,
        batch: &Batch,
        kinds: &[LossKind],
        mode: DropoutMode,
        rng: &mut Rng,
        counter: &mut BackwardCounter,
    ) -> Result<TaskPass> {
        check_len(self.task_count(), kinds.len())?;
        check_len(self.task_count(), batch.targets.len())?;
        let trunk = self.forward_trunk(batch.inputs.view(), mode, rng)?;
        let m = self.task_count();
        let mut losses = Vec::with_capacity(m);
        let mut repr_grads = Vec::with_capacity(m);
        let mut head_grads = Vec::with_capacity(m);
        for (i, kind) in kinds.iter().enumerate() {
            let head = self.forward_head(i, trunk.z.view())?;
            let (loss, dout) = task_loss_grad(head.output.view(), &batch.targets[i], *kind)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: 0,
                    detail: format!("task {i} loss is {loss}"),
                });
            }
            let (hg, dz) = self.backward_head(i, &head, dout.view())?;
            counter.head += 1;
            losses.push(loss);
            head_grads.push(hg);
            repr_grads.push(dz);
        }
        Ok(TaskPass {
            trunk,
            losses,
            repr_grads,
            head_grads,
        })
    }
}

fn layer_grad(input: &Array2<f64>, d: &Array2<f64>) -> Vec<f64> {
    let dw = input.t().dot(d);
    let db = d.sum_axis(Axis(0));
    dw.iter().chain(db.iter()).copied().collect()
}

/// Everything computed on one batch before any trunk backward.
#[derive(Clone, Debug)]
pub struct TaskPass {
    pub trunk: TrunkCache,
    pub losses: Vec<f64>,
    /// `dL_i/dz`, each `b x r`.
    pub repr_grads: Vec<Array2<f64>>,
    /// Flat gradient of each task loss w.r.t. its own head.
    pub head_grads: Vec<Vec<f64>>,
}

/// Per-task parameter-space gradients.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    /// Row `i` is the gradient of task `i` w.r.t. the trunk parameters.
    pub trunk: GradientSet,
    pub heads: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

/// Adds the L2 share of each task: `lambda/m * theta` on the trunk and
/// `lambda * theta_i` on head `i`, from the penalty `lambda/2 * ||theta||^2`.
pub fn add_l2(model: &MultiTaskModel, trunk_rows: &mut [Vec<f64>], heads: &mut [Vec<f64>], lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    let m = model.task_count() as f64;
    let theta = model.trunk_params();
    for row in trunk_rows.iter_mut() {
        row.iter_mut().zip(&theta).for_each(|(g, t)| *g += lambda / m * t);
    }
    for (i, h) in heads.iter_mut().enumerate() {
        h.iter_mut()
            .zip(model.head_params(i))
            .for_each(|(g, t)| *g += lambda * t);
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("L2 coefficient {lambda} must be finite and nonnegative")))
    }
}

/// One trunk backward per task. Dropout masks are shared by all tasks.
pub fn per_task_param_grads(
    model: &MultiTaskModel,
    batch: &Batch,
    kinds: &[LossKind],
    lambda: f64,
    mode: DropoutMode,
    rng: &mut Rng,
    counter: &mut BackwardCounter,
) -> Result<ParamGrads> {
    check_lambda(lambda)?;
    let pass = model.task_pass(batch, kinds, mode, rng, counter)?;
    param_grads_from_pass(model, pass, lambda, counter)
}

/// Trunk backward for each task of an existing pass.
pub fn param_grads_from_pass(
    model: &MultiTaskModel,
    pass: TaskPass,
    lambda: f64,
    counter: &mut BackwardCounter,
) -> Result<ParamGrads> {
    check_lambda(lambda)?;
    let mut rows = Vec::with_capacity(pass.repr_grads.len());
    for dz in &pass.repr_grads {
        rows.push(model.backward_trunk(&pass.trunk, dz.view())?);
        counter.trunk += 1;
    }
    let mut heads = pass.head_grads;
    add_l2(model, &mut rows, &mut heads, lambda);
    let rows = rows
        .into_iter()
        .map(|r| {
            DenseVector::new(r).map_err(|_| Error::Divergence {
                step: 0,
                detail: "non-finite trunk gradient".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamGrads {
        trunk: GradientSet::new(rows, Space::Parameter)?,
        heads,
        losses: pass.losses,
    })
}

/// Gradients w.r.t. the shared representation, flattened row-major over `b x r`.
/// Costs one head backward per task and no trunk backward.
pub fn per_task_repr_grads(
    model: &MultiTaskModel,
    batch: &Batch,
    kinds: &[LossKind],
    mode: DropoutMode,
    rng: &mut Rng,
    counter: &mut BackwardCounter,
) -> Result<(GradientSet, TaskPass)> {
    let pass = model.task_pass(batch, kinds, mode, rng, counter)?;
    let gs = repr_gradient_set(&pass)?;
    Ok((gs, pass))
}

pub fn repr_gradient_set(pass: &TaskPass) -> Result<GradientSet> {
    let rows = pass
        .repr_grads
        .iter()
        .map(|dz| {
            DenseVector::new(dz.iter().copied().collect()).map_err(|_| Error::Divergence {
                step: 0,
                detail: "non-finite representation gradient".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GradientSet::new(rows, Space::Representation)
}

/// Pulls a representation-space vector back to the trunk parameters with one
/// trunk backward: returns `(dz/dtheta)^T v`.
pub fn jvp_trunk(model: &MultiTaskModel, cache: &TrunkCache, v: &[f64], counter: &mut BackwardCounter) -> Result<Vec<f64>> {
    check_len(cache.z.len(), v.len())?;
    let dz = ArrayView2::from_shape(cache.z.dim(), v).map_err(|e| Error::Validation(e.to_string()))?;
    let out = model.backward_trunk(cache, dz)?;
    counter.trunk += 1;
    Ok(out)
}
