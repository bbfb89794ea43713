//! End-to-end checks of the command-line contract: exit codes, artifact
//! layout, schema headers, and byte-identical reruns. Runs stay tiny — tens
//! of epochs — because they exercise plumbing, not convergence.

use std::path::Path;
use std::process::{Command, Output};

fn upinn(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_upinn"));
    cmd.args(args);
    match out_env {
        Some(dir) => cmd.env("UPINN_OUT_DIR", dir),
        None => cmd.env_remove("UPINN_OUT_DIR"),
    };
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_flame_config(path: &Path, epochs: usize, seed: u64) {
    let text = format!(
        r#"{{
  "problem": "flame",
  "seed": {seed},
  "epochs": {epochs},
  "points": 8,
  "body": {{ "hidden": [10], "latent": 6, "activation": "tanh" }},
  "head": {{ "hidden": [6], "activation": "tanh" }},
  "lr": 0.002,
  "lr_decay": 0.05,
  "lr_period": 15000,
  "ur": {{ "enabled": true, "lambda": 5e-7, "every_n": 10 }},
  "checkpoint_every": 1000
}}"#
    );
    std::fs::write(path, text).unwrap();
}

fn write_transfer_config(path: &Path, epochs: usize) {
    let text = format!(
        r#"{{
  "seed": 4,
  "epochs": {epochs},
  "points": 8,
  "lr": 0.005,
  "lr_decay": 0.025,
  "lr_period": 2500,
  "checkpoint_every": 1000
}}"#
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn malformed_json_exits_2_with_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let out_dir = dir.path().join("out");
    let out = upinn(
        &[
            "train-body",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);
    assert!(!out_dir.exists(), "no partial outputs on a config error");
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("extra.json");
    write_flame_config(&cfg, 5, 1);
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["surprise"] = serde_json::json!(true);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = upinn(&["train-body", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&out), 2);
}

#[test]
fn dry_run_prints_resolved_config_without_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flame.json");
    write_flame_config(&cfg, 5, 1);
    let out_dir = dir.path().join("out");
    let out = upinn(
        &[
            "train-body",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--dry-run",
        ],
        None,
    );
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    // Defaults are materialized in the echoed config.
    assert!(text.contains("\"noise_scale\": 1.0"));
    assert!(text.contains("config hash: "));
    assert!(text.contains("head grid: [0.02, 0.0267, 0.0333, 0.04]"));
    assert!(!out_dir.exists(), "dry-run must not write artifacts");
}

#[test]
fn missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let tl = dir.path().join("tl.json");
    write_transfer_config(&tl, 5);
    let out = upinn(
        &[
            "transfer",
            "--body",
            dir.path().join("absent.ckpt").to_str().unwrap(),
            "--param",
            "0.018",
            "--config",
            tl.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_zero_seeds_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flame.json");
    let tl = dir.path().join("tl.json");
    write_flame_config(&cfg, 5, 1);
    write_transfer_config(&tl, 5);
    let out = upinn(
        &[
            "ablate",
            "--problem",
            "flame",
            "--seeds",
            "0",
            "--config",
            cfg.to_str().unwrap(),
            "--tl-config",
            tl.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn train_transfer_eval_pipeline_and_idempotent_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flame.json");
    let tl = dir.path().join("tl.json");
    write_flame_config(&cfg, 30, 7);
    write_transfer_config(&tl, 20);

    // Output root comes from the environment when --out is absent.
    let out_dir = dir.path().join("env-out");
    let out = upinn(
        &["train-body", "--config", cfg.to_str().unwrap()],
        Some(&out_dir),
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = out_dir.join("flame_body_ur.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("run.csv").exists());
    assert!(out_dir.join("geometry.csv").exists());
    assert!(out_dir.join("run_meta.json").exists());
    let run_csv = std::fs::read(out_dir.join("run.csv")).unwrap();
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();

    // Reruns land byte-identically (wall time lives in run_meta.json only).
    let out = upinn(
        &["train-body", "--config", cfg.to_str().unwrap()],
        Some(&out_dir),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(out_dir.join("run.csv")).unwrap(), run_csv);
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes);

    // Transfer prints the frozen-body hash twice, unchanged.
    let out = upinn(
        &[
            "transfer",
            "--body",
            ckpt.to_str().unwrap(),
            "--param",
            "0.018",
            "--config",
            tl.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let hashes: Vec<&str> = text
        .lines()
        .filter(|l| l.contains("frozen body sha256"))
        .collect();
    assert_eq!(hashes.len(), 2);
    let before = hashes[0].rsplit(' ').next().unwrap();
    let after = hashes[1].rsplit(' ').next().unwrap();
    assert_eq!(before, after);
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes, "body untouched");
    assert!(out_dir.join("flame_head_0.018.ckpt").exists());
    assert!(out_dir.join("head_0.018_eval.csv").exists());
    assert!(out_dir.join("head_0.018_report.json").exists());

    // Eval a single member against the analytic oracle.
    let eval_dir = dir.path().join("eval");
    let out = upinn(
        &[
            "eval",
            "--model",
            ckpt.to_str().unwrap(),
            "--member",
            "1",
            "--oracle",
            "implicit",
            "--out",
            eval_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let plot = std::fs::read_to_string(eval_dir.join("flame_member1_eval.csv")).unwrap();
    assert_eq!(plot.lines().next().unwrap(), "t,y_nn,y_oracle,re_percent");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    assert!(report["rms_percent"].is_f64());
    assert!(report["max_re_percent"].is_f64());
    assert_eq!(report["oracle"], "implicit");
    assert_eq!(report["schema_version"], 1);

    // The transfer head evaluates standalone when joined to its body.
    let head_eval = dir.path().join("head-eval");
    let out = upinn(
        &[
            "eval",
            "--model",
            out_dir.join("flame_head_0.018.ckpt").to_str().unwrap(),
            "--body",
            ckpt.to_str().unwrap(),
            "--out",
            head_eval.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(head_eval.join("flame_head_0.018_eval.csv").exists());
}

#[test]
fn implicit_oracle_on_vdp_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("vdp.json");
    std::fs::write(
        &cfg,
        r#"{
  "problem": "vdp",
  "seed": 3,
  "epochs": 5,
  "points": 6,
  "body": { "hidden": [8], "latent": 6, "activation": "tanh" },
  "head": { "hidden": [6], "activation": "tanh" },
  "lr": 0.001,
  "lr_decay": 0.025,
  "lr_period": 15000,
  "ur": { "enabled": false, "lambda": 0.0, "every_n": 100 },
  "checkpoint_every": 1000
}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = upinn(
        &[
            "train-body",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = upinn(
        &[
            "eval",
            "--model",
            out_dir.join("vdp_body.ckpt").to_str().unwrap(),
            "--oracle",
            "implicit",
            "--out",
            dir.path().join("eval").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_writes_table_with_median_and_win_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flame.json");
    let tl = dir.path().join("tl.json");
    write_flame_config(&cfg, 15, 40);
    write_transfer_config(&tl, 10);
    let out_dir = dir.path().join("out");
    let out = upinn(
        &[
            "ablate",
            "--problem",
            "flame",
            "--seeds",
            "2",
            "--config",
            cfg.to_str().unwrap(),
            "--tl-config",
            tl.to_str().unwrap(),
            "--jobs",
            "2",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "seed,tl_rms_ur,tl_rms_nour,ur_win,sqrtg_mean_ur,sqrtg_mean_nour,\
         median_tl_rms_ur,median_tl_rms_nour,win_rate"
    );
    assert_eq!(lines.len(), 3, "one row per seed");
    assert!(lines[1].starts_with("40,"));
    assert!(lines[2].starts_with("41,"));
    // Both arms of both seeds trained: per-seed subdirectories exist.
    for seed in ["seed40", "seed41"] {
        for arm in ["ur", "nour"] {
            assert!(out_dir.join(seed).join(arm).join("run.csv").exists());
        }
    }
}
