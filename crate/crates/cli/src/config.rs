//! Experiment file schema.
//!
//! ```json
//! {
//!   "suite": { "kind": "blobs", "config": { "tasks": 4, "classes": 3, "input_dim": 8,
//!              "samples": 1200, "separation": 8.0 }, "seed": 0 },
//!   "methods": [ "unitary", { "method": "mgda", "space": "representation" } ],
//!   "training": { "epochs": 50, "batch_size": 64, "lr": 0.003, "lr_decay": 0.95 },
//!   "seeds": [0, 1, 2],
//!   "sweep": { "l2": [0, 0.0001, 0.001], "dropout": [0, 0.5] }
//! }
//! ```
//!
//! A method is either a label (`"rgd-p0.25"`) or an object whose `method`
//! field is a label or a tagged method (`{"name": "rlw", "distribution": "normal"}`).
//! Relative paths are resolved against the directory of the experiment file.

use std::fs;
use std::path::{Path, PathBuf};

use mtopt::aggregators::Method;
use mtopt::grad::Space;
use mtopt::minnorm::MinNormConfig;
use mtopt::net::OptimizerKind;
use mtopt::tasks::{
    load_multimnist, make_blob_classification, make_scale_imbalanced_regression, BlobConfig, MultiMnistConfig,
    RegressionConfig, TaskSuite,
};
use mtopt::trainer::{Architecture, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub suite: SuiteSpec,
    pub methods: Vec<MethodRun>,
    pub training: Training,
    /// Explicit run seeds; `0..repetitions` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    /// Record per-epoch wall time. Without it the `seconds` column is zero
    /// and repeated runs produce identical files.
    pub timing: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSpec {
    Blobs {
        #[serde(default)]
        config: BlobConfig,
        #[serde(default)]
        seed: u64,
    },
    Regression {
        config: RegressionConfig,
        #[serde(default)]
        seed: u64,
    },
    MultiMnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        config: MultiMnistConfig,
        #[serde(default)]
        seed: u64,
    },
    /// A suite saved with `TaskSuite::save`.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodRun {
    #[serde(deserialize_with = "method_field")]
    pub method: Method,
    #[serde(default)]
    pub space: Space,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imtl_l: Option<f64>,
}

impl MethodRun {
    pub fn label(&self) -> String {
        self.train_config(&Training::default(), 0).label()
    }

    fn train_config(&self, t: &Training, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method.clone(),
            space: self.space,
            imtl_l: self.imtl_l,
            architecture: t.architecture.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            optimizer: t.optimizer,
            l2: t.l2,
            dropout: t.dropout,
            seed,
            eval_every: t.eval_every,
            norm_every: t.norm_every,
            unitary_fast_path: t.unitary_fast_path,
            qp: t.qp,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MethodRepr {
    Label(String),
    Full(Method),
}

fn method_field<'de, D: Deserializer<'de>>(d: D) -> Result<Method, D::Error> {
    match MethodRepr::deserialize(d)? {
        MethodRepr::Label(s) => s.parse().map_err(serde::de::Error::custom),
        MethodRepr::Full(m) => Ok(m),
    }
}

impl<'de> Deserialize<'de> for MethodRunEntry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            Label(String),
            Run(MethodRun),
        }
        Ok(MethodRunEntry(match Entry::deserialize(d)? {
            Entry::Label(s) => MethodRun {
                method: s.parse().map_err(serde::de::Error::custom)?,
                space: Space::Parameter,
                imtl_l: None,
            },
            Entry::Run(r) => r,
        }))
    }
}

/// Accepts a bare label wherever a [`MethodRun`] is expected.
pub(crate) struct MethodRunEntry(pub MethodRun);

/// Training settings shared by every run of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Training {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    pub l2: f64,
    pub dropout: f64,
    pub eval_every: usize,
    pub norm_every: usize,
    pub unitary_fast_path: bool,
    pub qp: MinNormConfig,
}

impl Default for Training {
    fn default() -> Self {
        let t = TrainConfig::new(Method::Unitary);
        Training {
            architecture: t.architecture,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            optimizer: t.optimizer,
            l2: t.l2,
            dropout: t.dropout,
            eval_every: t.eval_every,
            norm_every: t.norm_every,
            unitary_fast_path: t.unitary_fast_path,
            qp: t.qp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub l2: Vec<f64>,
    pub dropout: Vec<f64>,
}

/// One fully specified training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub id: String,
    /// Key shared by the seeds of one configuration.
    pub group: String,
    pub config: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: RawExperiment = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let cfg = raw.into_config();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.suite {
            SuiteSpec::MultiMnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            SuiteSpec::File { path } => fix(path),
            _ => {}
        }
        if let Some(out) = &mut self.output {
            fix(out);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Usage("config lists no methods".into()));
        }
        if self.seeds.is_some() && self.repetitions.is_some() {
            return Err(CliError::Usage("give either seeds or repetitions, not both".into()));
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) || self.repetitions == Some(0) {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        if let SuiteSpec::MultiMnist { test_images, test_labels, .. } = &self.suite {
            if test_images.is_some() != test_labels.is_some() {
                return Err(CliError::Usage("test_images and test_labels go together".into()));
            }
        }
        if let Some(grid) = &self.sweep {
            grid_check(&grid.l2, &grid.dropout)?;
        }
        for run in &self.methods {
            run.train_config(&self.training, 0)
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match (&self.seeds, self.repetitions) {
            (Some(s), _) => s.clone(),
            (None, Some(n)) => (0..n as u64).collect(),
            (None, None) => vec![0],
        }
    }

    /// Keeps only methods whose label (with or without space suffix) matches.
    pub fn restrict_methods(&mut self, name: &str) -> Result<(), CliError> {
        let wanted = name.parse::<Method>().ok();
        self.methods
            .retain(|r| r.label() == name || wanted.as_ref() == Some(&r.method));
        if self.methods.is_empty() {
            return Err(CliError::Usage(format!("no configured method matches `{name}`")));
        }
        Ok(())
    }

    /// Runs of `run`: every method times every seed.
    pub fn plans(&self) -> Vec<RunPlan> {
        let mut out = Vec::new();
        for m in &self.methods {
            for seed in self.seed_list() {
                let config = m.train_config(&self.training, seed);
                let group = config.label();
                out.push(RunPlan {
                    id: format!("{}-s{seed}", file_safe(&group)),
                    group,
                    config,
                });
            }
        }
        out
    }

    /// Runs of `sweep`: every method, L2 value, dropout rate and seed.
    pub fn sweep_plans(&self, l2: &[f64], dropout: &[f64]) -> Result<Vec<RunPlan>, CliError> {
        grid_check(l2, dropout)?;
        let mut out = Vec::new();
        for m in &self.methods {
            for &lambda in l2 {
                for &p in dropout {
                    for seed in self.seed_list() {
                        let mut config = m.train_config(&self.training, seed);
                        config.l2 = lambda;
                        config.dropout = p;
                        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                        let group = format!("{} l2={lambda} dropout={p}", config.label());
                        out.push(RunPlan {
                            id: format!("{}-l2_{lambda}-do_{p}-s{seed}", file_safe(&config.label())),
                            group,
                            config,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn build_suite(&self) -> Result<TaskSuite, CliError> {
        let suite = match &self.suite {
            SuiteSpec::Blobs { config, seed } => make_blob_classification(config, *seed),
            SuiteSpec::Regression { config, seed } => make_scale_imbalanced_regression(config, *seed),
            SuiteSpec::MultiMnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                config,
                seed,
            } => {
                let test = test_images.as_deref().zip(test_labels.as_deref());
                load_multimnist(train_images, train_labels, test, config, *seed)
            }
            SuiteSpec::File { path } => TaskSuite::load(path),
        };
        suite.map_err(CliError::from)
    }
}

fn grid_check(l2: &[f64], dropout: &[f64]) -> Result<(), CliError> {
    if l2.is_empty() || dropout.is_empty() {
        return Err(CliError::Usage("sweep grids must be nonempty".into()));
    }
    Ok(())
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '.' => c,
            _ => '_',
        })
        .collect()
}

/// Mirror of [`ExperimentConfig`] that accepts bare method labels.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    suite: SuiteSpec,
    methods: Vec<MethodRunEntry>,
    #[serde(default)]
    training: Training,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    repetitions: Option<usize>,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(default)]
    sweep: Option<SweepGrid>,
    #[serde(default = "default_true")]
    timing: bool,
}

impl RawExperiment {
    fn into_config(self) -> ExperimentConfig {
        ExperimentConfig {
            suite: self.suite,
            methods: self.methods.into_iter().map(|m| m.0).collect(),
            training: self.training,
            seeds: self.seeds,
            repetitions: self.repetitions,
            output: self.output,
            sweep: self.sweep,
            timing: self.timing,
        }
    }
}
