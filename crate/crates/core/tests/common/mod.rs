//! Random small networks and finite-difference helpers shared by the
//! gradient tests.

#![allow(dead_code)]

use mtopt::net::{task_loss, Activation, Batch, LossKind, ModelSpec, MultiTaskModel, Targets, TrunkCache};
use mtopt::rng::Rng;
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

// relative error with the denominator floored at 1e-6
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_setup(rng: &mut Rng) -> (MultiTaskModel, Batch, Vec<LossKind>) {
    let input_dim = rng.random_range(2..5);
    let depth = rng.random_range(1..3);
    let trunk: Vec<usize> = (0..depth).map(|_| rng.random_range(2..6)).collect();
    let head_hidden = if rng.random::<bool>() { vec![rng.random_range(2..4)] } else { vec![] };
    let m = rng.random_range(2..4);
    let kinds: Vec<LossKind> = (0..m)
        .map(|_| match rng.random_range(0..3) {
            0 => LossKind::CrossEntropy,
            1 => LossKind::Mse,
            _ => LossKind::L1,
        })
        .collect();
    let outputs: Vec<usize> = kinds.iter().map(|_| rng.random_range(1..4)).collect();
    let spec = ModelSpec {
        input_dim,
        trunk,
        head_hidden,
        outputs: outputs.iter().zip(&kinds).map(|(&o, k)| if *k == LossKind::CrossEntropy { o + 1 } else { o }).collect(),
        activation: if rng.random::<bool>() { Activation::Tanh } else { Activation::Relu },
        dropout: if rng.random::<bool>() { 0.3 } else { 0.0 },
    };
    let model = MultiTaskModel::init(&spec, rng).unwrap();
    assert!(model.param_count() <= 200, "{} params", model.param_count());
    let b = rng.random_range(2..6);
    let x = Array2::from_shape_simple_fn((b, input_dim), || rng.random_range(-1.5..1.5));
    let targets = kinds
        .iter()
        .zip(&spec.outputs)
        .map(|(k, &o)| match k {
            LossKind::CrossEntropy => Targets::Classes((0..b).map(|_| rng.random_range(0..o)).collect()),
            _ => Targets::Values(Array2::from_shape_simple_fn((b, o), || rng.random_range(-1.0..1.0))),
        })
        .collect();
    (model, Batch::new(x, targets).unwrap(), kinds)
}

// loss of task i with the given dropout masks, computed by a plain forward pass
pub fn loss_with(model: &MultiTaskModel, batch: &Batch, kind: LossKind, task: usize, cache: &TrunkCache) -> f64 {
    let trunk = model.forward_trunk_masked(batch.inputs.view(), &cache.masks).unwrap();
    let head = model.forward_head(task, trunk.z.view()).unwrap();
    task_loss(head.output.view(), &batch.targets[task], kind).unwrap()
}

pub fn head_loss_from_z(model: &MultiTaskModel, z: ArrayView2<f64>, batch: &Batch, kind: LossKind, task: usize) -> f64 {
    let head = model.forward_head(task, z).unwrap();
    task_loss(head.output.view(), &batch.targets[task], kind).unwrap()
}
