//! Multi-task training loop.
//!
//! Each step runs the trunk once, backpropagates every task through its own
//! head, then forms the shared update according to the configured method:
//!
//! * unitary: one trunk backward of the summed cotangent;
//! * parameter space: one trunk backward per task, then aggregation;
//! * representation space: aggregation of `dL_i/dz`, then one trunk backward.
//!
//! Heads always step with their own task gradient.

mod quadratic;
mod record;

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregators::{aggregate, imtl_l_step, LossScaleState, Method, ReprLayout};
use crate::error::{Error, Result};
use crate::grad::{DenseVector, GradientSet, Space};
use crate::minnorm::MinNormConfig;
use crate::net::{
    add_l2, Activation, BackwardCounter, Batch, DropoutMode, LossKind, ModelSpec, MultiTaskModel, Optimizer,
    OptimizerKind, TaskPass,
};
use crate::rng::{stream, Stream};
use crate::tasks::{SplitKind, TaskSuite};

pub use quadratic::{train_quadratic, QuadraticConfig, QuadraticRun};
pub use record::{select_model, EpochRecord, RunRecord};
pub(crate) use record::csv_error;

fn one() -> usize {
    1
}

fn default_decay() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Network shape; input and output widths come from the suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub trunk: Vec<usize>,
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            trunk: vec![64, 64],
            head_hidden: vec![],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub space: Space,
    /// Step size of the learned IMTL-L loss scales; off when absent.
    #[serde(default)]
    pub imtl_l: Option<f64>,
    #[serde(default)]
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied after every epoch.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// L2 coefficient for the penalty `l2/2 * ||theta||^2`.
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Measure the summed-gradient norm every this many updates.
    #[serde(default = "one")]
    pub norm_every: usize,
    /// Take the single-backward route for unitary scalarization.
    #[serde(default = "default_true")]
    pub unitary_fast_path: bool,
    #[serde(default)]
    pub qp: MinNormConfig,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            space: Space::Parameter,
            imtl_l: None,
            architecture: Architecture::default(),
            epochs: 10,
            batch_size: 64,
            lr: 1e-2,
            lr_decay: 1.0,
            optimizer: OptimizerKind::Adam,
            l2: 0.0,
            dropout: 0.0,
            seed: 0,
            eval_every: 1,
            norm_every: 1,
            unitary_fast_path: true,
            qp: MinNormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if !self.method.supports(self.space) {
            return Err(Error::Config(format!(
                "{} cannot aggregate in {:?} space",
                self.method, self.space
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.norm_every == 0 {
            return Err(Error::Config("epochs, batch_size, eval_every and norm_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr must be positive and lr_decay in (0, 1]".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("l2 must be nonnegative and dropout in [0, 1)".into()));
        }
        if let Some(eta) = self.imtl_l {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config("imtl_l step size must be positive".into()));
            }
        }
        if self.architecture.trunk.is_empty() || self.architecture.trunk.contains(&0) {
            return Err(Error::Config("architecture needs positive trunk widths".into()));
        }
        Ok(())
    }

    /// Human-readable run label, e.g. `mgda` or `graddrop@repr+imtl-l`.
    pub fn label(&self) -> String {
        let mut s = self.method.label();
        if self.space == Space::Representation {
            s.push_str("@repr");
        }
        if self.imtl_l.is_some() {
            s.push_str("+imtl-l");
        }
        s
    }
}

pub fn model_spec(suite: &TaskSuite, cfg: &TrainConfig) -> ModelSpec {
    ModelSpec {
        input_dim: suite.input_dim(),
        trunk: cfg.architecture.trunk.clone(),
        head_hidden: cfg.architecture.head_hidden.clone(),
        outputs: suite.output_dims(),
        activation: cfg.architecture.activation,
        dropout: cfg.dropout,
    }
}

/// Freshly initialized model for `suite`, seeded from the run seed.
pub fn build_model(suite: &TaskSuite, cfg: &TrainConfig) -> Result<MultiTaskModel> {
    MultiTaskModel::init(&model_spec(suite, cfg), &mut stream(cfg.seed, Stream::Init))
}

/// Per-task metrics on one split with dropout off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub losses: Vec<f64>,
    /// Accuracy for classification tasks, the loss for regression tasks.
    pub metrics: Vec<f64>,
    pub average: f64,
}

pub fn evaluate(model: &MultiTaskModel, suite: &TaskSuite, split: SplitKind) -> Result<Metrics> {
    evaluate_batch(model, suite.split(split), &suite.kinds())
}

pub fn evaluate_batch(model: &MultiTaskModel, batch: &Batch, kinds: &[LossKind]) -> Result<Metrics> {
    let preds = model.predict(batch.inputs.view())?;
    let mut losses = Vec::with_capacity(kinds.len());
    let mut metrics = Vec::with_capacity(kinds.len());
    for ((p, t), &k) in preds.iter().zip(&batch.targets).zip(kinds) {
        losses.push(crate::net::task_loss(p.view(), t, k)?);
        metrics.push(crate::net::task_metric(p.view(), t, k)?);
    }
    let average = metrics.iter().sum::<f64>() / metrics.len().max(1) as f64;
    Ok(Metrics {
        losses,
        metrics,
        average,
    })
}

/// Result of [`train`]: the record plus the model picked on validation.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub selected_model: MultiTaskModel,
}

/// What one optimizer step did.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: Vec<f64>,
    /// Shared-parameter update direction before the learning rate.
    pub direction: Vec<f64>,
    /// `||sum_i grad L_i||` over the trunk, when measured on this step.
    pub summed_norm: Option<f64>,
    /// Time spent measuring `summed_norm`, excluded from run timings.
    pub diagnostic_seconds: f64,
    pub stalled: bool,
    pub imtl_clamped: bool,
}

/// Mutable per-run state for stepping a model.
pub struct Stepper {
    pub cfg: TrainConfig,
    kinds: Vec<LossKind>,
    optimizer: Optimizer,
    loss_scales: Option<LossScaleState>,
    dropout_rng: crate::rng::Rng,
    agg_rng: crate::rng::Rng,
    pub counter: BackwardCounter,
    pub steps: u64,
}

impl Stepper {
    pub fn new(cfg: TrainConfig, model: &MultiTaskModel, kinds: Vec<LossKind>) -> Result<Self> {
        cfg.validate()?;
        if kinds.len() != model.task_count() {
            return Err(Error::Dimension {
                expected: model.task_count(),
                found: kinds.len(),
            });
        }
        let loss_scales = cfg
            .imtl_l
            .map(|eta| LossScaleState::new(kinds.len(), eta))
            .transpose()?;
        Ok(Stepper {
            optimizer: Optimizer::new(cfg.optimizer, model),
            dropout_rng: stream(cfg.seed, Stream::Dropout),
            agg_rng: stream(cfg.seed, Stream::Aggregator),
            kinds,
            loss_scales,
            counter: BackwardCounter::default(),
            steps: 0,
            cfg,
        })
    }

    /// Computes the update for `batch` without changing the model.
    pub fn direction(
        &mut self,
        model: &MultiTaskModel,
        batch: &Batch,
        measure_norm: bool,
    ) -> Result<(StepReport, Vec<Vec<f64>>)> {
        let step = self.steps + 1;
        let pass = model
            .task_pass(batch, &self.kinds, DropoutMode::Train, &mut self.dropout_rng, &mut self.counter)
            .map_err(|e| e.at_step(step))?;
        let timer = Instant::now();
        let summed_norm = if measure_norm {
            Some(summed_gradient_norm(model, &pass)?)
        } else {
            None
        };
        let diagnostic_seconds = timer.elapsed().as_secs_f64();
        let mut imtl_clamped = false;
        let scales = match &self.loss_scales {
            Some(state) => {
                let next = imtl_l_step(state, &pass.losses).map_err(|e| divergence(e, step))?;
                imtl_clamped = next.clamped;
                let scales = next.scales.clone();
                self.loss_scales = Some(next.state);
                Some(scales)
            }
            None => None,
        };
        let losses = pass.losses.clone();
        let scaled_losses: Vec<f64> = match &scales {
            Some(s) => losses.iter().zip(s).map(|(l, s)| l * s).collect(),
            None => losses.clone(),
        };
        let (direction, heads) = self.shared_direction(model, pass, scales.as_deref(), &scaled_losses, step)?;
        let stalled = direction.iter().all(|v| *v == 0.0);
        Ok((
            StepReport {
                losses,
                direction,
                summed_norm,
                diagnostic_seconds,
                stalled,
                imtl_clamped,
            },
            heads,
        ))
    }

    fn shared_direction(
        &mut self,
        model: &MultiTaskModel,
        pass: TaskPass,
        scales: Option<&[f64]>,
        scaled_losses: &[f64],
        step: u64,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let lambda = self.cfg.l2;
        let scale = |i: usize| scales.map_or(1.0, |s| s[i]);
        let mut heads: Vec<Vec<f64>> = pass
            .head_grads
            .iter()
            .enumerate()
            .map(|(i, h)| h.iter().map(|v| v * scale(i)).collect())
            .collect();
        let mut no_rows: Vec<Vec<f64>> = Vec::new();
        add_l2(model, &mut no_rows, &mut heads, lambda);

        if self.cfg.method.is_unitary() && self.cfg.unitary_fast_path {
            let mut total = Array2::<f64>::zeros(pass.trunk.z.dim());
            for (i, dz) in pass.repr_grads.iter().enumerate() {
                total.scaled_add(scale(i), dz);
            }
            let grad = model.backward_trunk(&pass.trunk, total.view())?;
            self.counter.trunk += 1;
            let theta = model.trunk_params();
            let direction = grad.iter().zip(&theta).map(|(g, t)| -(g + lambda * t)).collect();
            return Ok((finite(direction, step)?, heads));
        }

        match self.cfg.space {
            Space::Parameter => {
                let mut rows = Vec::with_capacity(pass.repr_grads.len());
                for (i, dz) in pass.repr_grads.iter().enumerate() {
                    let mut row = model.backward_trunk(&pass.trunk, dz.view())?;
                    self.counter.trunk += 1;
                    if scales.is_some() {
                        row.iter_mut().for_each(|v| *v *= scale(i));
                    }
                    rows.push(row);
                }
                add_l2(model, &mut rows, &mut [], lambda);
                let gs = gradient_set(rows, Space::Parameter, step)?;
                let agg = aggregate(&self.cfg.method, &gs, scaled_losses, None, self.cfg.qp, &mut self.agg_rng)
                    .map_err(|e| divergence(e, step))?;
                Ok((agg.direction.into_vec(), heads))
            }
            Space::Representation => {
                let rows = pass
                    .repr_grads
                    .iter()
                    .enumerate()
                    .map(|(i, dz)| dz.iter().map(|v| v * scale(i)).collect())
                    .collect();
                let gs = gradient_set(rows, Space::Representation, step)?;
                let z = DenseVector::new(pass.trunk.z.iter().copied().collect()).map_err(|e| divergence(e, step))?;
                let layout = ReprLayout {
                    activations: &z,
                    width: model.repr_dim(),
                };
                let agg = aggregate(
                    &self.cfg.method,
                    &gs,
                    scaled_losses,
                    Some(layout),
                    self.cfg.qp,
                    &mut self.agg_rng,
                )
                .map_err(|e| divergence(e, step))?;
                let pulled = crate::net::jvp_trunk(model, &pass.trunk, agg.direction.as_slice(), &mut self.counter)?;
                let theta = model.trunk_params();
                let direction = pulled.iter().zip(&theta).map(|(g, t)| g - lambda * t).collect();
                Ok((finite(direction, step)?, heads))
            }
        }
    }

    /// One optimizer step on `batch` with learning rate `lr`.
    pub fn step(&mut self, model: &mut MultiTaskModel, batch: &Batch, lr: f64, measure_norm: bool) -> Result<StepReport> {
        let (report, heads) = self.direction(model, batch, measure_norm)?;
        self.steps += 1;
        self.optimizer
            .step(model, &report.direction, &heads, lr)
            .map_err(|e| e.at_step(self.steps))?;
        Ok(report)
    }
}

fn divergence(e: Error, step: u64) -> Error {
    match e {
        Error::Validation(detail) | Error::Degenerate(detail) => Error::Divergence { step, detail },
        other => other.at_step(step),
    }
}

fn finite(v: Vec<f64>, step: u64) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            detail: "non-finite shared update".into(),
        })
    }
}

fn gradient_set(rows: Vec<Vec<f64>>, space: Space, step: u64) -> Result<GradientSet> {
    let rows = rows
        .into_iter()
        .map(|r| DenseVector::new(r).map_err(|e| divergence(e, step)))
        .collect::<Result<Vec<_>>>()?;
    GradientSet::new(rows, space)
}

/// `||sum_i dL_i/dtheta||` over the trunk for an existing pass, without the
/// L2 term. Not counted as a backward pass.
pub fn summed_gradient_norm(model: &MultiTaskModel, pass: &TaskPass) -> Result<f64> {
    let mut total = Array2::<f64>::zeros(pass.trunk.z.dim());
    for dz in &pass.repr_grads {
        total += dz;
    }
    let g = model.backward_trunk(&pass.trunk, total.view())?;
    Ok(g.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Trains `model` in place and returns the per-epoch record together with
/// the model from the epoch chosen by [`select_model`].
pub fn train(model: &mut MultiTaskModel, suite: &TaskSuite, cfg: &TrainConfig) -> Result<RunOutcome> {
    let kinds = suite.kinds();
    let mut stepper = Stepper::new(cfg.clone(), model, kinds.clone())?;
    let mut order_rng = stream(cfg.seed, Stream::DataOrder);
    let maximize: Vec<bool> = kinds.iter().map(|k| k.metric_is_maximized()).collect();
    let n = suite.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut lr = cfg.lr;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MultiTaskModel)> = None;
    let mut stalls = 0u64;
    let mut imtl_clamps = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut seconds = 0.0;
        let mut norms = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = suite.train.select(chunk);
            let measure = (stepper.steps + 1) % cfg.norm_every as u64 == 0;
            let started = Instant::now();
            let report = stepper.step(model, &batch, lr, measure)?;
            seconds += started.elapsed().as_secs_f64() - report.diagnostic_seconds;
            if let Some(norm) = report.summed_norm {
                norms.push(norm);
            }
            stalls += report.stalled as u64;
            imtl_clamps += report.imtl_clamped as u64;
        }
        lr *= cfg.lr_decay;

        let train_metrics = evaluate_batch(model, &suite.train, &kinds)?;
        let validate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val = if validate {
            Some(evaluate(model, suite, SplitKind::Val)?.metrics)
        } else {
            None
        };
        if let Some(v) = &val {
            let score = record::signed_average(v, &maximize);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, model.clone()));
            }
        }
        epochs.push(EpochRecord {
            epoch,
            train_losses: train_metrics.losses.clone(),
            total_loss: train_metrics.losses.iter().sum(),
            val_metrics: val.clone(),
            val_average: val.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
            update_norm: if norms.is_empty() {
                None
            } else {
                Some(norms.iter().sum::<f64>() / norms.len() as f64)
            },
            backwards: stepper.counter.trunk,
            head_backwards: stepper.counter.head,
            seconds,
        });
    }

    let (_, selected, selected_model) = best.expect("last epoch is always validated");
    let test = evaluate(&selected_model, suite, SplitKind::Test)?;
    let record = RunRecord {
        label: cfg.label(),
        seed: cfg.seed,
        tasks: kinds.len(),
        maximize,
        epochs,
        selected_epoch: selected,
        test_metrics: test.metrics,
        test_average: test.average,
        steps: stepper.steps,
        stalls,
        imtl_clamps,
    };
    debug_assert_eq!(select_model(&record.epochs, &record.maximize), Some(selected));
    Ok(RunOutcome {
        record,
        selected_model,
    })
}

/// Builds a model from the run seed and trains it.
pub fn run(suite: &TaskSuite, cfg: &TrainConfig) -> Result<(MultiTaskModel, RunOutcome)> {
    cfg.validate()?;
    let mut model = build_model(suite, cfg)?;
    let outcome = train(&mut model, suite, cfg)?;
    Ok((model, outcome))
}
