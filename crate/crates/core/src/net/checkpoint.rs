//! Model checkpoints as JSON.
//!
//! ```text
//! {
//!   "version": 1,
//!   "activation": "relu",
//!   "dropout": [0.1, 0.1],
//!   "trunk": [{"rows": 3, "cols": 4, "weight": [...], "bias": [...]}, ...],
//!   "heads": [[{"rows": 4, "cols": 2, "weight": [...], "bias": [...]}], ...]
//! }
//! ```
//!
//! `weight` is the `(rows, cols)` matrix flattened row-major. Floats are
//! written in shortest round-trip form, so loading restores the exact values.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Dense, MultiTaskModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    activation: Activation,
    dropout: Vec<f64>,
    trunk: Vec<LayerRecord>,
    heads: Vec<Vec<LayerRecord>>,
}

fn record(layer: &Dense) -> LayerRecord {
    LayerRecord {
        rows: layer.input_dim(),
        cols: layer.output_dim(),
        weight: layer.weight.iter().copied().collect(),
        bias: layer.bias.to_vec(),
    }
}

fn layer(rec: LayerRecord) -> Result<Dense> {
    let weight = Array2::from_shape_vec((rec.rows, rec.cols), rec.weight)
        .map_err(|e| Error::Validation(format!("checkpoint layer shape: {e}")))?;
    Dense::new(weight, Array1::from(rec.bias))
}

pub fn to_json(model: &MultiTaskModel) -> Result<String> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        activation: model.activation(),
        dropout: model.dropout().to_vec(),
        trunk: model.trunk_layers().iter().map(record).collect(),
        heads: (0..model.task_count())
            .map(|i| model.head_layers(i).iter().map(record).collect())
            .collect(),
    };
    Ok(serde_json::to_string(&ckpt)?)
}

pub fn from_json(text: &str) -> Result<MultiTaskModel> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version {}",
            ckpt.version
        )));
    }
    let trunk = ckpt.trunk.into_iter().map(layer).collect::<Result<Vec<_>>>()?;
    let heads = ckpt
        .heads
        .into_iter()
        .map(|h| h.into_iter().map(layer).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    MultiTaskModel::new(trunk, heads, ckpt.activation, ckpt.dropout)
}

pub fn save(model: &MultiTaskModel, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MultiTaskModel> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelSpec;
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_exact() {
        let spec = ModelSpec {
            input_dim: 5,
            trunk: vec![7, 4],
            head_hidden: vec![3],
            outputs: vec![2, 1, 3],
            activation: Activation::Tanh,
            dropout: 0.25,
        };
        let model = MultiTaskModel::init(&spec, &mut seeded(42)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&model, &path).unwrap();
        assert_eq!(load(&path).unwrap(), model);
    }

    #[test]
    fn rejects_bad_checkpoints() {
        let model = MultiTaskModel::new(
            vec![Dense::zeros(2, 2)],
            vec![vec![Dense::zeros(2, 1)]],
            Activation::Relu,
            vec![0.0],
        )
        .unwrap();
        let text = to_json(&model).unwrap();
        assert!(from_json(&text.replace("\"version\":1", "\"version\":9")).is_err());
        assert!(from_json(&text.replace("\"rows\":2,\"cols\":2", "\"rows\":3,\"cols\":2")).is_err());
        assert!(from_json("{}").is_err());
    }
}
