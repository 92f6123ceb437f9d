//! End-to-end checks of the `patkit` binary: exit codes, frozen configs and
//! the files each command writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn patkit(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_patkit"));
    cmd.args(args).env("PATKIT_THREADS", "1");
    if let Some(out) = out {
        cmd.arg("--out").arg(out);
    }
    cmd.output().expect("spawn patkit")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &[&str] = &["--per-class", "4", "--points", "48", "--width", "16", "--plan", "fps24,gss8", "--epochs", "1"];

fn tiny_train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    patkit(&args, Some(out))
}

#[test]
fn help_and_version_succeed_and_usage_errors_exit_1() {
    assert_eq!(code(&patkit(&["--help"], None)), 0);
    assert_eq!(code(&patkit(&["--version"], None)), 0);
    assert_eq!(code(&patkit(&[], None)), 1);
    assert_eq!(code(&patkit(&["frobnicate"], None)), 1);
    assert_eq!(code(&patkit(&["train", "--precision", "f16"], None)), 1);
}

#[test]
fn invalid_configuration_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tiny_train(&dir.path().join("a"), &["--set", "width=15"])), 1);
    assert_eq!(code(&tiny_train(&dir.path().join("b"), &["--set", "no_such_key=1"])), 1);
    assert_eq!(code(&tiny_train(&dir.path().join("c"), &["--config", "/nonexistent/cfg.txt"])), 1);
    assert_eq!(code(&tiny_train(&dir.path().join("d"), &["--synthetic", "shapes9"])), 1);
}

#[test]
fn train_freezes_its_config_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = tiny_train(&run, &["--set", "lr=0.002"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "run.txt", "metrics.csv", "epoch001.ckpt", "confusion.csv", "eval.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let frozen = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(frozen.lines().any(|l| l.replace(' ', "") == "lr=0.002"), "{frozen}");
    assert!(frozen.lines().any(|l| l.replace(' ', "") == "width=16"), "{frozen}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,step,loss,acc,tau,lr"));

    let ckpt = run.join("epoch001.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let cfg = run.join("config.txt");
    let e = patkit(&["eval", "--checkpoint", ckpt, "--config", cfg.to_str().unwrap(), "--per-class", "4"], Some(&dir.path().join("eval")));
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let stdout = String::from_utf8_lossy(&e.stdout);
    assert!(stdout.contains("accuracy"), "{stdout}");
    assert!(dir.path().join("eval/confusion.csv").exists());

    let other = dir.path().join("other.txt");
    fs::write(&other, "width = 32\n").unwrap();
    let e = patkit(&["eval", "--checkpoint", ckpt, "--config", other.to_str().unwrap(), "--per-class", "4"], None);
    assert_eq!(code(&e), 1);
    assert!(String::from_utf8_lossy(&e.stderr).contains("width"));
}

#[test]
fn f64_checkpoints_are_detected_by_eval() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&tiny_train(&run, &["--precision", "f64"])), 0);
    let ckpt = run.join("epoch001.ckpt");
    let e = patkit(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--per-class", "4"], None);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_train(&dir.path().join("run"), &["--set", "epochs=4", "--set", "lr=1e6", "--set", "clip_norm=1e12"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn missing_checkpoint_and_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&patkit(&["eval", "--checkpoint", "/nonexistent.ckpt"], None)), 1);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(&patkit(&["eval", "--checkpoint", bad.to_str().unwrap()], None)), 2);
}

#[test]
fn proptest_runs_selected_properties_and_reports_failures_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let ok = patkit(&["proptest", "--only", "fps-witness,shuffle-bijection"], Some(&dir.path().join("ok")));
    assert_eq!(code(&ok), 0);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("PASS fps-witness") && stdout.contains("PASS shuffle-bijection"), "{stdout}");
    assert!(dir.path().join("ok/suite.txt").exists());

    // A tolerance no finite sample can meet forces a failure.
    let out = dir.path().join("bad");
    let bad = patkit(&["proptest", "--only", "gumbel-max-unbiased", "--trials", "500", "--set", "gumbel_tol=1e-9"], Some(&out));
    assert_eq!(code(&bad), 3);
    let dump = fs::read_to_string(out.join("gumbel-max-unbiased.counterexample.txt")).unwrap();
    assert!(dump.contains("replay = patkit proptest --only gumbel-max-unbiased"), "{dump}");

    assert_eq!(code(&patkit(&["proptest", "--only", "no-such-property"], None)), 1);
    let list = patkit(&["proptest", "--list"], None);
    assert_eq!(code(&list), 0);
    assert!(String::from_utf8_lossy(&list.stdout).lines().count() >= 30);
}

#[test]
fn sample_writes_cloud_fps_and_gss_selections() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = patkit(&["sample", "--points", "64", "--width", "16", "--plan", "fps32,gss16,gss8"], Some(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["cloud.txt", "fps.txt", "gss_block1.txt", "gss_block2.txt", "config.txt", "run.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let fps = fs::read_to_string(out.join("fps.txt")).unwrap();
    assert_eq!(fps.lines().filter(|l| !l.starts_with('#')).count(), 32);
    let gss = fs::read_to_string(out.join("gss_block2.txt")).unwrap();
    assert_eq!(gss.lines().filter(|l| !l.starts_with('#')).count(), 8);
}

#[test]
fn bench_writes_a_csv_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = patkit(&["bench", "--runs", "2", "--batch", "1", "--points", "48", "--width", "32", "--plan", "fps24,gss8"], Some(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    // header + GSA g=1,2,4,8 + MHA-LG + MHA-SM
    assert_eq!(csv.lines().count(), 7, "{csv}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("closed form per block"));
}
