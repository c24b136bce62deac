use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::net::MultiTaskModel;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    // Adam step for a loss gradient `grad`; returns the parameter increment.
    fn increment(&mut self, grad: &[f64], t: u64, lr: f64) -> Vec<f64> {
        let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), &g)| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                -lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

/// SGD or Adam over the trunk and every head.
///
/// The trunk receives an update direction `g` (a descent direction, applied as
/// `theta += lr * g`); Adam treats `-g` as the gradient. Heads receive their
/// own loss gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    trunk: Moments,
    heads: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &MultiTaskModel) -> Self {
        Optimizer {
            kind,
            step: 0,
            trunk: Moments::new(model.trunk_param_count()),
            heads: (0..model.task_count())
                .map(|i| Moments::new(model.head_param_count(i)))
                .collect(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut MultiTaskModel, direction: &[f64], head_grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {lr} must be positive")));
        }
        check_len(self.trunk.m.len(), direction.len())?;
        check_len(self.heads.len(), head_grads.len())?;
        for (state, g) in self.heads.iter().zip(head_grads) {
            check_len(state.m.len(), g.len())?;
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                model.trunk_params_mut().zip(direction).for_each(|(p, g)| *p += lr * g);
                for (i, g) in head_grads.iter().enumerate() {
                    model.head_params_mut(i).zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let grad: Vec<f64> = direction.iter().map(|g| -g).collect();
                let inc = self.trunk.increment(&grad, self.step, lr);
                model.trunk_params_mut().zip(&inc).for_each(|(p, d)| *p += d);
                for (i, g) in head_grads.iter().enumerate() {
                    let inc = self.heads[i].increment(g, self.step, lr);
                    model.head_params_mut(i).zip(&inc).for_each(|(p, d)| *p += d);
                }
            }
        }
        if model.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                step: self.step,
                detail: "non-finite parameters after update".into(),
            })
        }
    }
}
