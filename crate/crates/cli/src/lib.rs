//! Experiment runner behind the `mtopt` binary.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 divergence.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json        command, resolved config, one entry per run
//! runs/<id>.csv        per-epoch record
//! runs/<id>.json       training config and full run record
//! sweep.csv            best-validation table (sweep only)
//! ```

pub mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtopt::tasks::TaskSuite;
use mtopt::trainer::{run, RunRecord, TrainConfig};
use mtopt::verify::{counterexample_dump, run_all, Hooks, PropertyOutcome, VerifyConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, MethodRun, RunPlan, SuiteSpec, SweepGrid, Training};
pub use report::{cmd_report, load_artifacts, ReportRow, ReportTable};

pub const OUT_ENV: &str = "MTOPT_OUT";
const DEFAULT_OUT: &str = "mtopt-out";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{failed} verification properties failed")]
    Verify { failed: usize },
    #[error("run {run} diverged at step {step}: {detail}")]
    Divergence { run: String, step: u64, detail: String },
    #[error(transparent)]
    Core(#[from] mtopt::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify { .. } => 1,
            CliError::Divergence { .. } | CliError::Core(mtopt::Error::Divergence { .. }) => 3,
            CliError::Usage(_) | CliError::Core(_) | CliError::Io(_) => 2,
        }
    }
}

/// Command-line overrides shared by `run` and `sweep`.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    /// Worker threads; 0 picks the number of cores.
    pub jobs: usize,
    pub keep_going: bool,
}

/// Everything stored about one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub id: String,
    pub group: String,
    pub config: TrainConfig,
    pub record: RunRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: String,
    /// `ok` or `diverged`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub json: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_average: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    runs: &'a [ManifestEntry],
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub artifacts: Vec<RunArtifact>,
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

fn output_root(opts: &RunOptions, cfg: &ExperimentConfig) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn prepare(config_path: &Path, opts: &RunOptions) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        cfg.seeds = Some(vec![seed]);
        cfg.repetitions = None;
    }
    if let Some(name) = &opts.method {
        cfg.restrict_methods(name)?;
    }
    Ok(cfg)
}

/// Trains every method for every seed of the experiment.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let cfg = prepare(config_path, opts)?;
    let plans = cfg.plans();
    execute("run", &cfg, plans, opts)
}

fn execute(command: &str, cfg: &ExperimentConfig, plans: Vec<RunPlan>, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let suite = cfg.build_suite()?;
    let out_dir = output_root(opts, cfg);
    fs::create_dir_all(out_dir.join("runs"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunArtifact, CliError>> =
        pool.install(|| plans.par_iter().map(|p| train_one(&suite, p, cfg.timing)).collect());

    let mut entries = Vec::with_capacity(plans.len());
    let mut artifacts = Vec::new();
    let mut first_divergence = None;
    for (plan, result) in plans.iter().zip(results) {
        match result {
            Ok(artifact) => {
                let csv_rel = format!("runs/{}.csv", plan.id);
                let json_rel = format!("runs/{}.json", plan.id);
                write_atomic(&out_dir.join(&csv_rel), artifact.record.to_csv_string()?.as_bytes())?;
                let json = serde_json::to_string_pretty(&artifact).map_err(mtopt::Error::from)?;
                write_atomic(&out_dir.join(&json_rel), json.as_bytes())?;
                entries.push(ManifestEntry {
                    id: plan.id.clone(),
                    group: plan.group.clone(),
                    status: "ok".into(),
                    csv: Some(csv_rel),
                    json: Some(json_rel),
                    test_average: Some(artifact.record.test_average),
                    error: None,
                });
                artifacts.push(artifact);
            }
            Err(CliError::Core(mtopt::Error::Divergence { step, detail })) => {
                entries.push(ManifestEntry {
                    id: plan.id.clone(),
                    group: plan.group.clone(),
                    status: "diverged".into(),
                    csv: None,
                    json: None,
                    test_average: None,
                    error: Some(format!("step {step}: {detail}")),
                });
                first_divergence.get_or_insert(CliError::Divergence {
                    run: plan.id.clone(),
                    step,
                    detail,
                });
            }
            Err(e) => return Err(e),
        }
    }

    let manifest = Manifest { command, config: cfg, runs: &entries };
    let text = serde_json::to_string_pretty(&manifest).map_err(mtopt::Error::from)?;
    write_atomic(&out_dir.join("manifest.json"), text.as_bytes())?;

    match first_divergence {
        Some(e) if !opts.keep_going => Err(e),
        _ => Ok(RunSummary { out_dir, entries, artifacts }),
    }
}

fn train_one(suite: &TaskSuite, plan: &RunPlan, timing: bool) -> Result<RunArtifact, CliError> {
    let (_, outcome) = run(suite, &plan.config)?;
    let mut record = outcome.record;
    if !timing {
        record.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
    }
    Ok(RunArtifact {
        id: plan.id.clone(),
        group: plan.group.clone(),
        config: plan.config.clone(),
        record,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub l2: f64,
    pub dropout: f64,
    pub runs: usize,
    /// Mean over seeds of the selected epoch's average validation metric.
    pub val_metric: f64,
    /// Whether this cell is the method's best (largest accuracy, smallest loss).
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub run: RunSummary,
    pub rows: Vec<SweepRow>,
}

/// Cross product of methods, L2 values, dropout rates and seeds. The grid
/// comes from the arguments when given, otherwise from the config.
pub fn cmd_sweep(
    config_path: &Path,
    grid: Option<SweepGrid>,
    opts: &RunOptions,
) -> Result<SweepSummary, CliError> {
    let cfg = prepare(config_path, opts)?;
    let grid = grid
        .or_else(|| cfg.sweep.clone())
        .ok_or_else(|| CliError::Usage("no sweep grid given".into()))?;
    let plans = cfg.sweep_plans(&grid.l2, &grid.dropout)?;
    let run = execute("sweep", &cfg, plans, opts)?;
    let rows = sweep_table(&run.artifacts);

    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_atomic(&run.out_dir.join("sweep.csv"), &bytes)?;
    Ok(SweepSummary { run, rows })
}

fn selected_validation(r: &RunRecord) -> Option<(f64, f64)> {
    let e = r.epochs.iter().find(|e| e.epoch == r.selected_epoch)?;
    let v = e.val_metrics.as_ref()?;
    let raw = v.iter().sum::<f64>() / v.len() as f64;
    let signed = v
        .iter()
        .zip(&r.maximize)
        .map(|(x, &up)| if up { *x } else { -*x })
        .sum::<f64>()
        / v.len() as f64;
    Some((raw, signed))
}

/// One row per (method, L2, dropout) cell, in input order of first appearance.
pub fn sweep_table(artifacts: &[RunArtifact]) -> Vec<SweepRow> {
    let mut cells: Vec<((String, u64, u64), Vec<(f64, f64)>)> = Vec::new();
    for a in artifacts {
        let key = (a.config.label(), a.config.l2.to_bits(), a.config.dropout.to_bits());
        let Some(v) = selected_validation(&a.record) else { continue };
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => vals.push(v),
            None => cells.push((key, vec![v])),
        }
    }
    let mut rows: Vec<(SweepRow, f64)> = cells
        .into_iter()
        .map(|((method, l2, dropout), vals)| {
            let n = vals.len() as f64;
            let raw = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let signed = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let row = SweepRow {
                method,
                l2: f64::from_bits(l2),
                dropout: f64::from_bits(dropout),
                runs: vals.len(),
                val_metric: raw,
                best: false,
            };
            (row, signed)
        })
        .collect();
    let mut best: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, (row, score)) in rows.iter().enumerate() {
        let slot = best.entry(row.method.clone()).or_insert((*score, i));
        if *score > slot.0 {
            *slot = (*score, i);
        }
    }
    for (_, i) in best.values() {
        rows[*i].0.best = true;
    }
    rows.into_iter().map(|(r, _)| r).collect()
}

/// Runs every property suite; failures are dumped to `counterexamples.json`
/// under `out` when given.
pub fn cmd_verify(cfg: &VerifyConfig, out: Option<&Path>) -> Result<Vec<PropertyOutcome>, CliError> {
    verify_with(cfg, &Hooks::default(), out)
}

pub fn verify_with(cfg: &VerifyConfig, hooks: &Hooks, out: Option<&Path>) -> Result<Vec<PropertyOutcome>, CliError> {
    let outcomes = run_all(cfg, hooks)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        if let Some(dir) = out {
            let dump = serde_json::to_string_pretty(&counterexample_dump(&outcomes)).map_err(mtopt::Error::from)?;
            write_atomic(&dir.join("counterexamples.json"), dump.as_bytes())?;
        }
    }
    Ok(outcomes)
}

/// One line per property.
pub fn format_outcome(o: &PropertyOutcome) -> String {
    format!(
        "{} {} ({} cases, worst {:e}, tolerance {:e})",
        if o.passed { "PASS" } else { "FAIL" },
        o.name,
        o.cases,
        o.worst,
        o.tolerance
    )
}
