use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kst_core::assembly::TransformerPipeline;
use kst_core::harness::flip_memo_bit;

fn kstnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kstnet")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cell(text: &str) -> f64 {
    match text.split_once('/') {
        Some((a, b)) => a.parse::<f64>().unwrap() / b.parse::<f64>().unwrap(),
        None => text.parse().unwrap(),
    }
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const MEAN: &str = r#"{"d":1,"n":2,"beta":1,"Q":1,"epsilon":0.25,"metric":"linf","target":"mean","seed":0}"#;

#[test]
fn synth_reports_parameters_and_writes_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "mean.json", MEAN);
    let out = kstnet(&["synth", "mean.json", "-o", "p.json", "--labels", "labels.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("K=2 H=3  |Lambda|=32"), "{}", stdout(&out));
    let p = TransformerPipeline::from_json(&fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(p.manifest.lambda_size, 32);
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().next(), Some("m,s,r,label"));
    assert_eq!(labels.lines().count(), 1 + 32);
}

#[test]
fn large_epsilon_clamps_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "c.json", &MEAN.replace("0.25", "2"));
    let out = kstnet(&["synth", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("K=1 H=1"), "{}", stdout(&out));
    assert!(stderr(&out).contains("clamped"), "{}", stderr(&out));
}

#[test]
fn oversized_request_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"d":2,"n":4,"beta":1,"Q":1,"epsilon":0.0009765625,"metric":"linf","target":"mean"}"#;
    config(dir.path(), "big.json", body);
    let out = kstnet(&["synth", "big.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("80"), "{}", stderr(&out));
    assert!(!dir.path().join("pipeline.json").exists());
}

#[test]
fn eval_examples() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "mean.json", MEAN);
    config(dir.path(), "const.json", &MEAN.replace("\"mean\"", "\"0.7\""));
    assert_eq!(kstnet(&["synth", "mean.json", "-o", "mean.p"], dir.path()).status.code(), Some(0));
    assert_eq!(kstnet(&["synth", "const.json", "-o", "const.p"], dir.path()).status.code(), Some(0));

    let out = kstnet(&["eval", "const.p", "--input", "0.1,0.9"], dir.path());
    // Labels are f64, so exact mode prints the dyadic value of 0.7.
    assert!(stdout(&out).trim().split(',').all(|t| cell(t) == 0.7), "{}", stdout(&out));

    let out = kstnet(&["eval", "mean.p", "--input", "0.5,0", "--mode", "exact"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for text in stdout(&out).trim().split(',') {
        assert!((cell(text) - 0.25).abs() <= 0.25);
    }

    fs::write(dir.path().join("x.csv"), "0.5, 0\n").unwrap();
    assert_eq!(stdout(&kstnet(&["eval", "mean.p", "--csv", "x.csv"], dir.path())), stdout(&out));

    fs::write(dir.path().join("bad.csv"), "0.5,zero\n").unwrap();
    assert_eq!(kstnet(&["eval", "mean.p", "--csv", "bad.csv"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("ragged.csv"), "0.5,0\n0.1\n").unwrap();
    assert_eq!(kstnet(&["eval", "mean.p", "--csv", "ragged.csv"], dir.path()).status.code(), Some(2));

    let out = kstnet(&["eval", "mean.p", "--input", "1.5,0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("out of domain"));
    let out = kstnet(&["eval", "mean.p", "--input", "0.5,0", "--mode", "float"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mode unsupported"));
}

#[test]
fn verify_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "mean.json", MEAN);
    let out = kstnet(&["verify", "mean.json", "--suite", "all", "--report", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("PASS")).count(), 3);
    assert!(fs::read_to_string(dir.path().join("r.json")).unwrap().contains("\"d_inf\""));

    assert_eq!(kstnet(&["synth", "mean.json", "-o", "p.json"], dir.path()).status.code(), Some(0));
    let p = TransformerPipeline::from_json(&fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
    let bad = flip_memo_bit(&p, 0, 0, 3).unwrap();
    fs::write(dir.path().join("bad.json"), bad.to_json().unwrap()).unwrap();
    let out = kstnet(&["verify", "mean.json", "--suite", "memo", "--pipeline", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL") && stdout(&out).contains("m = 3"), "{}", stdout(&out));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "mean.json", MEAN);
    assert_eq!(kstnet(&["verify", "mean.json", "--suite", "everything"], dir.path()).status.code(), Some(2));
    assert_eq!(kstnet(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(kstnet(&["synth", "missing.json"], dir.path()).status.code(), Some(2));
    config(dir.path(), "typo.json", &MEAN.replace("epsilon", "epsilom"));
    assert_eq!(kstnet(&["synth", "typo.json"], dir.path()).status.code(), Some(2));
    config(dir.path(), "expr.json", &MEAN.replace("\"mean\"", "\"x[3,1]\""));
    assert_eq!(kstnet(&["synth", "expr.json"], dir.path()).status.code(), Some(2));
    assert_eq!(kstnet(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn expression_targets_warn_on_understated_holder_constant() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "steep.json", &MEAN.replace("\"mean\"", "\"3 * x[1,1]\"").replace("0.25", "0.5"));
    let out = kstnet(&["synth", "steep.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("declared Q"), "{}", stderr(&out));
}
