//! End-to-end runs of the `codi` binary: every subcommand, the artifact
//! contract (metrics + checkpoint + manifest), and the usage exit code.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn codi(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_codi"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should launch")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for (path, _) in [(&a, 0), (&b, 1)] {
        let out = codi(
            &[
                "gen-data",
                "--seed",
                "7",
                "--size",
                "50",
                "--max-steps",
                "3",
                "--out",
                path.to_str().unwrap(),
            ],
            &[],
        );
        assert_ok(&out);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.meta.json").exists(), "generation sidecar");
}

fn tiny_train(dir: &Path, method: &str, extra: &[&str]) -> std::path::PathBuf {
    let data = dir.join("train.jsonl");
    if !data.exists() {
        assert_ok(&codi(
            &[
                "gen-data",
                "--seed",
                "3",
                "--size",
                "24",
                "--max-steps",
                "2",
                "--out",
                data.to_str().unwrap(),
            ],
            &[],
        ));
    }
    let out_dir = dir.join(format!("run-{method}"));
    let mut args = vec![
        "train",
        "--method",
        method,
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--hidden-dim",
        "16",
        "--num-layers",
        "2",
        "--num-heads",
        "2",
        "--total-steps",
        "4",
        "--batch-size",
        "4",
        "--num-latent",
        "2",
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    assert_ok(&codi(&args, &[]));
    out_dir
}

#[test]
fn train_eval_probe_report_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_train(dir.path(), "codi", &[]);

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "one line per step");
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "loss_total", "loss_student", "loss_teacher", "loss_kd", "grad_norm"]
    {
        assert!(first.get(key).is_some(), "metrics line missing {key}");
    }
    assert!(run.join("checkpoint.bin").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["method"], "codi");
    assert!(manifest["corpus"][0]["params_hash"].is_string());
    assert!(!run.join(".lock").exists(), "lock released");

    let ckpt = run.join("checkpoint.bin");
    let data = dir.path().join("train.jsonl");
    assert_ok(&codi(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--set",
            data.to_str().unwrap(),
        ],
        &[],
    ));
    let eval_json: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.join("eval-codi-train.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eval_json["method"], "codi");
    for key in [
        "accuracy",
        "avg_reasoning_tokens",
        "avg_forward_passes",
        "wall_time_per_problem",
        "compression_ratio",
    ] {
        assert!(eval_json["report"].get(key).is_some(), "report missing {key}");
    }
    // bot + 2 thoughts + eot
    assert_eq!(eval_json["report"]["avg_reasoning_tokens"], 4.0);

    assert_ok(&codi(
        &[
            "probe",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--set",
            data.to_str().unwrap(),
            "--limit",
            "5",
            "--include-incorrect",
        ],
        &[],
    ));
    assert!(run.join("probe.json").exists());
    let md = fs::read_to_string(run.join("probe.md")).unwrap();
    assert!(md.contains("| z1 |"), "markdown table rows:\n{md}");

    let report = codi(&["report", "--inputs", run.to_str().unwrap()], &[]);
    assert_ok(&report);
    let csv = String::from_utf8_lossy(&report.stdout);
    assert!(csv.starts_with("method,dataset,accuracy"));
    assert_eq!(csv.lines().count(), 2, "header plus one row:\n{csv}");
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    assert_ok(&codi(
        &["gen-data", "--seed", "3", "--size", "8", "--max-steps", "1", "--out", data.to_str().unwrap()],
        &[],
    ));

    // Unknown method.
    let out = codi(
        &["train", "--method", "bogus", "--data", data.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Missing corpus file.
    let out = codi(
        &["train", "--method", "codi", "--data", "/nonexistent/x.jsonl"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));

    // Bad config key.
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = codi(
        &[
            "train",
            "--method",
            "codi",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // Unknown flag (clap's own usage error).
    let out = codi(&["train", "--nonsense"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // Invalid config value.
    let out = codi(
        &[
            "train",
            "--method",
            "codi",
            "--data",
            data.to_str().unwrap(),
            "--batch-size",
            "0",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_root_env_var_places_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.jsonl");
    assert_ok(&codi(
        &["gen-data", "--seed", "4", "--size", "16", "--max-steps", "1", "--out", data.to_str().unwrap()],
        &[],
    ));
    let root = dir.path().join("artifacts");
    let out = codi(
        &[
            "train",
            "--method",
            "no-cot",
            "--data",
            data.to_str().unwrap(),
            "--hidden-dim",
            "16",
            "--num-layers",
            "2",
            "--num-heads",
            "2",
            "--total-steps",
            "2",
            "--batch-size",
            "4",
            "--seed",
            "9",
        ],
        &[("CODI_OUT_ROOT", root.to_str().unwrap())],
    );
    assert_ok(&out);
    assert!(root.join("no-cot-seed9").join("checkpoint.bin").exists());
    assert!(root.join("no-cot-seed9").join("manifest.json").exists());
}
