use std::fs;
use std::path::{Path, PathBuf};

use assert_cmd::Command;
use mtopt_cli::{cmd_report, cmd_run, cmd_sweep, RunOptions, SweepGrid};
use tempfile::TempDir;

const BASE: &str = r#"{
    "suite": {"kind": "blobs", "config": {"tasks": 2, "classes": 3, "input_dim": 4, "samples": 240, "separation": 6.0}, "seed": 3},
    "methods": ["unitary", "mgda"],
    "training": {"epochs": 2, "batch_size": 32, "lr": 0.01, "architecture": {"trunk": [8]}},
    "seeds": [0, 1, 2],
    "timing": false
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.json");
    fs::write(&path, text).unwrap();
    path
}

fn mtopt() -> Command {
    Command::cargo_bin("mtopt").unwrap()
}

fn files_in(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn run_writes_one_record_per_method_and_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = tmp.path().join("out");
    mtopt()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--jobs", "2"])
        .assert()
        .success();
    assert_eq!(files_in(&out.join("runs"), "csv").len(), 6);
    assert_eq!(files_in(&out.join("runs"), "json").len(), 6);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["command"], "run");
    let header = fs::read_to_string(out.join("runs/unitary-s0.csv")).unwrap();
    assert!(header.starts_with("epoch,loss_task_1,loss_task_2,loss_total,val_task_1,val_task_2,val_avg,update_norm,backwards,seconds\n"));
}

#[test]
fn repeated_runs_produce_identical_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let opts = |out: &str, jobs| RunOptions {
        out: Some(tmp.path().join(out)),
        jobs,
        ..Default::default()
    };
    let a = cmd_run(&cfg, &opts("a", 1)).unwrap();
    let b = cmd_run(&cfg, &opts("b", 3)).unwrap();
    for (x, y) in files_in(&a.out_dir.join("runs"), "csv").iter().zip(files_in(&b.out_dir.join("runs"), "csv")) {
        assert_eq!(fs::read(x).unwrap(), fs::read(&y).unwrap(), "{}", x.display());
    }
    assert_eq!(
        fs::read(a.out_dir.join("manifest.json")).unwrap(),
        fs::read(b.out_dir.join("manifest.json")).unwrap()
    );
}

#[test]
fn method_and_seed_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let out = tmp.path().join("out");
    mtopt()
        .args(["run", "--method=mgda", "--seed", "7", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    let names: Vec<String> = files_in(&out.join("runs"), "csv")
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["mgda-s7.csv"]);
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("[0, 1, 2]", "[0]"));
    let root = tmp.path().join("from-env");
    mtopt()
        .env("MTOPT_OUT", &root)
        .args(["run", "--method", "unitary", "--config"])
        .arg(&cfg)
        .assert()
        .success();
    assert!(root.join("runs/unitary-s0.json").is_file());
}

#[test]
fn bad_configs_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    for text in [
        BASE.replace("\"timing\"", "\"timeing\""),
        BASE.replace("\"mgda\"", "\"nonsense\""),
        "{ not json".to_string(),
    ] {
        let cfg = write_config(tmp.path(), &text);
        mtopt().args(["run", "--config"]).arg(&cfg).assert().code(2);
    }
    mtopt().args(["run", "--config", "/nonexistent/config.json"]).assert().code(2);
    mtopt().args(["frobnicate"]).assert().code(2);
}

const DIVERGING: &str = r#"{
    "suite": {"kind": "regression", "config": {"ratio": 100.0, "samples": 200}, "seed": 1},
    "methods": ["unitary", "imtl"],
    "training": {"epochs": 20, "batch_size": 32, "lr": 1e6, "optimizer": "sgd", "architecture": {"trunk": [8]}},
    "seeds": [0]
}"#;

#[test]
fn divergence_exits_3_unless_told_to_keep_going() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), DIVERGING);
    let out = tmp.path().join("out");
    let assert = mtopt().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).assert().code(3);
    let stderr = String::from_utf8_lossy(&assert.get_output().stderr).into_owned();
    assert!(stderr.contains("unitary-s0") && stderr.contains("step"), "{stderr}");

    mtopt()
        .args(["run", "--keep-going", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"diverged\""));
}

#[test]
fn sweep_covers_the_grid() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &BASE.replace("[0, 1, 2]", "[0, 1]"));
    let opts = RunOptions {
        out: Some(tmp.path().join("sweep")),
        method: Some("unitary".into()),
        ..Default::default()
    };
    let grid = SweepGrid {
        l2: vec![0.0, 1e-4, 1e-3],
        dropout: vec![0.0],
    };
    let s = cmd_sweep(&cfg, Some(grid), &opts).unwrap();
    assert_eq!(s.run.entries.len(), 6);
    assert_eq!(s.rows.len(), 3);
    assert_eq!(s.rows.iter().filter(|r| r.best).count(), 1);
    assert!(s.rows.iter().all(|r| r.runs == 2 && r.method == "unitary"));
    let table = fs::read_to_string(s.run.out_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    let empty = SweepGrid { l2: vec![], dropout: vec![0.0] };
    let err = cmd_sweep(&cfg, Some(empty), &opts).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    // no grid anywhere
    assert_eq!(cmd_sweep(&cfg, None, &opts).unwrap_err().exit_code(), 2);

    mtopt()
        .args(["sweep", "--method", "unitary", "--seed", "0", "--l2", "0,0.001", "--dropout", "0,0.5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("cli-sweep"))
        .assert()
        .success();
    assert_eq!(files_in(&tmp.path().join("cli-sweep/runs"), "csv").len(), 4);
}

#[test]
fn verify_passes_and_fails_at_zero_tolerance() {
    mtopt().arg("verify").assert().success();
    let tmp = TempDir::new().unwrap();
    mtopt()
        .args(["verify", "--tolerance", "0", "--out"])
        .arg(tmp.path())
        .assert()
        .code(1);
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("counterexamples.json")).unwrap()).unwrap();
    let failed = dump.as_array().unwrap();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|f| f["counterexample"]["rows"].is_array()));
}

#[test]
fn report_statistics_and_permutation_invariance() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), BASE);
    let a = cmd_run(
        &cfg,
        &RunOptions {
            out: Some(tmp.path().join("a")),
            ..Default::default()
        },
    )
    .unwrap();
    let single = cmd_run(
        &cfg,
        &RunOptions {
            out: Some(tmp.path().join("single")),
            seed: Some(0),
            method: Some("mgda".into()),
            ..Default::default()
        },
    )
    .unwrap();

    let table = cmd_report(&[single.out_dir.clone()]).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert!(table.to_text().contains("n=1, CI n/a"));

    // the same seed twice: identical records, zero-width interval
    let dup = cmd_report(&[single.out_dir.clone(), a.out_dir.join("runs/mgda-s0.json")]).unwrap();
    assert_eq!(dup.rows[0].runs, 2);
    assert_eq!(dup.rows[0].ci_half_width, Some(0.0));

    let mut files = files_in(&a.out_dir.join("runs"), "json");
    let forward = cmd_report(&files).unwrap();
    files.reverse();
    let backward = cmd_report(&files).unwrap();
    assert_eq!(forward, backward);
    assert_eq!(forward.to_csv().unwrap(), backward.to_csv().unwrap());
    assert_eq!(forward.rows.len(), 2);
    assert!(forward.rows.iter().all(|r| r.runs == 3 && r.ci_half_width.is_some()));

    mtopt().arg("report").arg(tmp.path().join("nothing-here")).assert().code(2);
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    mtopt().arg("report").arg(&empty).assert().code(2);
    mtopt()
        .arg("report")
        .arg(&a.out_dir)
        .arg("--csv")
        .arg(tmp.path().join("summary.csv"))
        .assert()
        .success();
    assert!(fs::read_to_string(tmp.path().join("summary.csv")).unwrap().starts_with("method,runs,test_avg"));
}
