use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    cli_threads(dir, 1, args)
}

fn cli_threads(dir: &Path, threads: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_influence-proxy"))
        .args(["--threads", &threads.to_string()])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn prepare(dir: &Path) {
    std::fs::write(dir.join("spec.json"), r#"{"train_size":300,"val_size":30,"test_size":60,"seed":2}"#).unwrap();
    ok(dir, &["gen-data", "--spec", "spec.json", "--out", "data"]);
    ok(dir, &["train", "--data", "data", "--out", "model.json", "--epochs", "1"]);
}

#[test]
fn full_budget_selects_everything() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(d, &["score", "--model", "model.json", "--data", "data", "--out", "scores.csv"]);
    ok(d, &["select", "--scores", "scores.csv", "--percent", "100", "--out", "sel.csv"]);
    let text = std::fs::read_to_string(d.join("sel.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("1")));
}

#[test]
fn compression_report_hits_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    ok(
        d,
        &[
            "compress", "--model", "model.json", "--data", "data", "--sparsity", "0.5", "--exclude-ends",
            "--probe-size", "64", "--align-size", "64", "--out", "proxy.json", "--report", "report.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    // 64x64 interior layers at rho 0.5 and rank_align 8: rank 16, 2048 of 4096 parameters
    let s = report["sparsity"].as_f64().unwrap();
    assert!((s - 0.5).abs() < 1e-12, "{s}");
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn failures_report_stage_file_and_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cli(d, &["score", "--model", "missing.json", "--data", "data", "--out", "s.csv"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("E_IO") && err.contains("missing.json") && err.contains("load-model"), "{err}");

    std::fs::write(d.join("bad.json"), "{\"seed\": 1, \"bogus\": 2}").unwrap();
    let out = cli(d, &["experiment", "--config", "bad.json", "--out", "o"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("E_FORMAT") && err.contains("bad.json"), "{err}");
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = |cmd: &str| String::from_utf8(cli(dir.path(), &[cmd, "--help"]).stdout).unwrap();
    assert!(help("compress").contains("[default: 0.001]"));
    let align = help("align");
    assert!(align.contains("[default: 0.1]") && align.contains("[default: 4]"));
    assert!(help("finetune-eval").contains("[default: 4]"));
    assert!(help("select").contains("[default: 5]"));
    for cmd in ["gen-data", "train", "score", "experiment"] {
        assert!(cli(dir.path(), &[cmd, "--help"]).status.success());
    }
}

#[test]
fn subcommands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let model = std::fs::read(d.join("model.json")).unwrap();
    ok(d, &["train", "--data", "data", "--out", "model.json", "--epochs", "1"]);
    assert_eq!(std::fs::read(d.join("model.json")).unwrap(), model);
    for est in ["tracin-cos", "tracin-inner", "if-kfac"] {
        ok(d, &["score", "--model", "model.json", "--data", "data", "--estimator", est, "--out", "a.csv"]);
        let out = cli_threads(d, 4, &["score", "--model", "model.json", "--data", "data", "--estimator", est, "--out", "b.csv"]);
        assert!(out.status.success());
        assert_eq!(std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap(), "{est}");
    }
}
