//! Smoke tests for the command-line surface: every subcommand runs end to end
//! on a miniature configuration and writes its advertised artifacts.

use std::path::Path;
use std::process::Command;

fn cord_cmd(out: &Path, extra: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cord"));
    cmd.arg("--out").arg(out).arg("--seed").arg("3");
    for o in [
        "n_examples=200",
        "aux_examples=30",
        "pretrain_steps=60",
        "max_steps=10",
        "checkpoints=5,10",
        "eval_examples=25",
    ] {
        cmd.arg("--override").arg(o);
    }
    cmd.args(extra);
    cmd
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn cord");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_data_writes_jsonl_splits() {
    let tmp = tempfile::TempDir::new().unwrap();
    run_ok(&mut cord_cmd(tmp.path(), &["generate-data"]));
    for f in ["train.jsonl", "val.jsonl", "eval.jsonl", "aux.jsonl", "config_resolved.cfg"] {
        assert!(tmp.path().join(f).exists(), "missing {}", f);
    }
}

#[test]
fn full_pipeline_pretrain_train_eval_analyze_sweep() {
    let tmp = tempfile::TempDir::new().unwrap();
    let base_dir = tmp.path().join("base");
    run_ok(&mut cord_cmd(&base_dir, &["pretrain"]));
    let base = base_dir.join("base.ckpt");
    assert!(base.exists());

    let train_dir = tmp.path().join("train");
    run_ok(&mut cord_cmd(
        &train_dir,
        &["--method", "cord", "train", "--base", base.to_str().unwrap()],
    ));
    for f in ["metrics.csv", "eval.csv", "gap_report.csv", "rewards.csv", "timing.csv"] {
        assert!(train_dir.join(f).exists(), "missing {}", f);
    }
    let ckpt = train_dir.join("cord_step10.ckpt");
    assert!(ckpt.exists());

    let eval_dir = tmp.path().join("eval");
    let out = run_ok(&mut cord_cmd(
        &eval_dir,
        &["eval", "--checkpoint", ckpt.to_str().unwrap()],
    ));
    assert!(out.contains("text"), "eval summary missing: {}", out);

    let an_dir = tmp.path().join("analyze");
    run_ok(&mut cord_cmd(
        &an_dir,
        &["analyze", "--checkpoint", base.to_str().unwrap(), "--percentile", "80"],
    ));
    for f in ["kl_records.jsonl", "kl_histogram.csv", "token_frequency.csv", "kl_stats.csv"] {
        assert!(an_dir.join(f).exists(), "missing {}", f);
    }

    let sweep_dir = tmp.path().join("sweep");
    run_ok(&mut cord_cmd(
        &sweep_dir,
        &["sweep", "--param", "alpha_beta", "--values", "1.0,2.0"],
    ));
    assert!(sweep_dir.join("sweep.csv").exists());
}

#[test]
fn unknown_override_key_is_rejected_with_exit_1() {
    let tmp = tempfile::TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cord"))
        .arg("--out")
        .arg(tmp.path())
        .arg("--override")
        .arg("no_such_key=1")
        .arg("generate-data")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_cord_threads_is_rejected() {
    let tmp = tempfile::TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cord"))
        .arg("--out")
        .arg(tmp.path())
        .env("CORD_THREADS", "zero")
        .arg("generate-data")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
