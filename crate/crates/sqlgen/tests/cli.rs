//! End-to-end tests of the `sqlgen` binary: dispatch, exit codes, error
//! classes, file formats, and cross-invocation reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn sqlgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp(label: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("cli")
        .join(label);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("train.json");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"{
    "steps": 40,
    "batch_on": 4,
    "eval_every": 20,
    "eval_samples": 8,
    "lr": 0.005,
    "model": {"arch": "recurrent_cell", "embed_dim": 4, "hidden_dim": 8}
}"#;

#[test]
fn unknown_subcommand_exits_2_with_usage_class() {
    let out = sqlgen(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[usage]"), "{err}");
}

#[test]
fn unknown_flag_exits_2_with_usage_class() {
    let out = sqlgen(&["oracle", "--task", "x.json", "--frob", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));
}

#[test]
fn missing_task_file_reports_io_class() {
    let out = sqlgen(&["oracle", "--task", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));
}

#[test]
fn malformed_task_reports_schema_class() {
    let dir = tmp("bad_task");
    let task = dir.join("task.json");
    std::fs::write(&task, r#"{"vocab": ["a"], "t_max": 0}"#).unwrap();
    let out = sqlgen(&["oracle", "--task", task.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[schema]"));
}

#[test]
fn oracle_dump_matches_hand_values() {
    let out = sqlgen(&[
        "oracle",
        "--task",
        fixture("ab.json").to_str().unwrap(),
        "--gamma",
        "1.0",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dump: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["n_states"], 3);
    let root = dump["states"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["prefix"].as_array().unwrap().is_empty())
        .unwrap();
    let q = root["q"].as_array().unwrap();
    let e = std::f64::consts::E;
    assert!((q[0].as_f64().unwrap() - (1.0 + e).ln()).abs() < 1e-9);
    assert!((q[1].as_f64().unwrap() - 2.0f64.ln()).abs() < 1e-9);
    assert!((root["v"].as_f64().unwrap() - (3.0 + e).ln()).abs() < 1e-9);
}

#[test]
fn train_writes_manifest_metrics_and_checkpoint() {
    let dir = tmp("train_basic");
    let config = write_config(&dir, SMALL_CONFIG);
    let out_dir = dir.join("run");
    let out = sqlgen(&[
        "train",
        "--task",
        fixture("ab.json").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["steps"], 40);
    assert_eq!(manifest["config"]["gamma"], 1.0);
    assert!(manifest["task_source"]["vocab"].is_array());

    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 40);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "loss_total",
        "loss_pcl_single",
        "loss_pcl_multi",
        "loss_mle",
        "loss_pg",
        "mean_reward_on",
    ] {
        assert!(first.get(key).is_some(), "missing metrics key {key}");
    }
    let eval_row: serde_json::Value = serde_json::from_str(
        metrics
            .lines()
            .find(|l| l.contains("mean_reward_greedy"))
            .expect("an eval row"),
    )
    .unwrap();
    for key in ["mean_reward_greedy", "h1", "h2", "tv_to_oracle"] {
        assert!(eval_row.get(key).is_some(), "missing eval key {key}");
    }

    let ck: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("checkpoint.json")).unwrap())
            .unwrap();
    for key in ["config", "params", "target_params", "step", "seed"] {
        assert!(ck.get(key).is_some(), "missing checkpoint key {key}");
    }
    assert_eq!(ck["step"], 40);
    assert_eq!(ck["seed"], 3);
}

#[test]
fn train_is_reproducible_across_invocations() {
    let dir = tmp("train_repro");
    let config = write_config(&dir, SMALL_CONFIG);
    for sub in ["a", "b"] {
        let out = sqlgen(&[
            "train",
            "--task",
            fixture("neg_lookup.json").to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.join(sub).to_str().unwrap(),
            "--seed",
            "9",
            "--threads",
            "1",
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(dir.join("a/metrics.jsonl")).unwrap();
    let b = std::fs::read(dir.join("b/metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn config_override_unknown_key_is_schema_error() {
    let dir = tmp("bad_override");
    let config = write_config(&dir, SMALL_CONFIG);
    let out = sqlgen(&[
        "train",
        "--task",
        fixture("ab.json").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
        "--set",
        "unknown_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[schema]"), "{err}");
    assert!(err.contains("unknown_key"), "{err}");
}

#[test]
fn config_override_applies_and_lands_in_manifest() {
    let dir = tmp("override_ok");
    let config = write_config(&dir, SMALL_CONFIG);
    let out_dir = dir.join("run");
    let out = sqlgen(&[
        "train",
        "--task",
        fixture("ab.json").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "gamma=0.9",
        "--set",
        "weights.w_mle=0.25",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["gamma"], 0.9);
    assert_eq!(manifest["config"]["weights"]["w_mle"], 0.25);
}

fn train_small(label: &str, task: &str) -> (PathBuf, PathBuf) {
    let dir = tmp(label);
    let config = write_config(&dir, SMALL_CONFIG);
    let out_dir = dir.join("run");
    let out = sqlgen(&[
        "train",
        "--task",
        fixture(task).to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    (out_dir.join("checkpoint.json"), fixture(task))
}

#[test]
fn sample_emits_jsonl_rows() {
    let (checkpoint, task) = train_small("sample_cmd", "ab.json");
    let out = sqlgen(&[
        "sample",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        task.to_str().unwrap(),
        "--mode",
        "top-p",
        "--p",
        "0.9",
        "-n",
        "5",
        "--seed",
        "4",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        assert!(row["tokens"].is_array());
        assert!(row["logprob"].as_f64().unwrap() <= 0.0);
        assert!(row["reward"].is_number());
    }
}

#[test]
fn eval_reports_sweep_and_oracle_fields() {
    let (checkpoint, task) = train_small("eval_cmd", "ab.json");
    let out = sqlgen(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        task.to_str().unwrap(),
        "--p",
        "0.5,1.0",
        "--samples",
        "64",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["greedy_reward"].is_number());
    let per_p = report["per_p"].as_array().unwrap();
    assert_eq!(per_p.len(), 2);
    for entry in per_p {
        assert!(entry["sample_reward_mean"].is_number());
        assert!(entry["h1"].is_number());
        assert!(entry["h2"].is_number());
    }
    assert!(report["tv_to_oracle"].is_number());
    assert!(report["soft_return"].is_number());
}

#[test]
fn eval_includes_nll_when_task_has_a_dataset() {
    let (checkpoint, _) = train_small("eval_nll", "ab.json");
    // Same vocabulary, so the checkpoint applies to the dataset task.
    let out = sqlgen(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--task",
        fixture("ab_mlepg.json").to_str().unwrap(),
        "--samples",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let nll = report["nll"].as_f64().unwrap();
    assert!((report["perplexity"].as_f64().unwrap() - nll.exp()).abs() < 1e-9);
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = sqlgen(&["gradcheck", "--seed", "7", "--probes", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("gradcheck PASS"), "{stdout}");
    assert!(stdout.contains("overall max_rel_err"));
}

#[test]
fn resume_continues_an_interrupted_run_exactly() {
    let dir = tmp("resume");
    let config_full = write_config(&dir, SMALL_CONFIG);
    let full_dir = dir.join("full");
    assert_eq!(
        sqlgen(&[
            "train",
            "--task",
            fixture("ab.json").to_str().unwrap(),
            "--config",
            config_full.to_str().unwrap(),
            "--out",
            full_dir.to_str().unwrap(),
        ])
        .status
        .code(),
        Some(0)
    );

    let part_dir = dir.join("part");
    assert_eq!(
        sqlgen(&[
            "train",
            "--task",
            fixture("ab.json").to_str().unwrap(),
            "--config",
            config_full.to_str().unwrap(),
            "--out",
            part_dir.to_str().unwrap(),
            "--set",
            "steps=20",
        ])
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        sqlgen(&[
            "train",
            "--task",
            fixture("ab.json").to_str().unwrap(),
            "--config",
            config_full.to_str().unwrap(),
            "--out",
            part_dir.to_str().unwrap(),
            "--resume",
            part_dir.join("checkpoint.json").to_str().unwrap(),
        ])
        .status
        .code(),
        Some(0)
    );
    let full = std::fs::read(full_dir.join("metrics.jsonl")).unwrap();
    let part = std::fs::read(part_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(full, part);
}
