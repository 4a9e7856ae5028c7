use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn xmap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xmap"))
}

fn run(args: &[&str]) -> Output {
    xmap().args(args).output().expect("spawn xmap")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small chain benchmark; returns the CSV path.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("syn");
    json(&run(&["synth", "--topology", "chain", "--seed", "3", "--length", "700", "-o", p(&out)]));
    out.join("data.csv")
}

const FAST: &[&str] = &["--kpi", "Y4", "-E", "2", "--max-delay", "15", "--neg-window", "5", "-D", "8"];

fn with_fast<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(FAST).copied().collect()
}

#[test]
fn help_and_parse_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["pipeline", "--max-delay", "many"])), 1);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"));
    let b = synth(&tmp.path().join("b"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let truth: Value = serde_json::from_slice(&fs::read(a.with_file_name("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["kpi"], "Y4");
    assert_eq!(truth["edges"].as_array().unwrap().len(), 3);
    assert_eq!(code(&run(&["synth", "--topology", "ring", "-o", p(tmp.path())])), 1);
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    // Missing KPI column is a data problem.
    assert_eq!(code(&run(&["ingest", "--data", p(&data), "--kpi", "nope"])), 2);
    // Invalid settings are configuration problems.
    assert_eq!(code(&run(&["ingest", "--data", p(&data), "--kpi", "Y4", "--tau", "0"])), 1);
    assert_eq!(code(&run(&["ingest", "--kpi", "Y4"])), 1);
    let bad = xmap()
        .args(["ingest", "--data", p(&data), "--kpi", "Y4"])
        .env("XMAP_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
    let ok = xmap()
        .args(["ingest", "--data", p(&data), "--kpi", "Y4"])
        .env("XMAP_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(json(&ok)["rows"], 700);
}

#[test]
fn stage_commands_print_json() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let embed = json(&run(&with_fast(&["embed-dim", "--data", p(&data)])));
    assert!(embed["dim"].as_u64().unwrap() >= 1);

    let cc = json(&run(&with_fast(&["tdccm", "--data", p(&data)])));
    assert_eq!(cc["pairs"].as_array().unwrap().len(), 3);

    let pc = json(&run(&with_fast(&["tdpcm", "--data", p(&data)])));
    let y3 = pc["pairs"].as_array().unwrap().iter().find(|r| r["cause"] == "Y3").unwrap().clone();
    assert_eq!(y3["tdccm_delay"], 2);
}

#[test]
fn select_then_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let sel_dir = tmp.path().join("sel");
    let sel = json(&run(&with_fast(&["select", "--data", p(&data), "-o", p(&sel_dir)])));
    assert!(sel["n_features"].as_u64().unwrap() > 0);
    let features = sel_dir.join("features.csv");
    assert!(fs::read_to_string(&features).unwrap().starts_with("variable,lag"));

    let eval_dir = tmp.path().join("eval");
    let ev = json(&run(&with_fast(&[
        "train-eval",
        "--data",
        p(&data),
        "--features",
        p(&features),
        "-o",
        p(&eval_dir),
    ])));
    assert_eq!(ev["n_features"], sel["n_features"]);
    assert!(ev["metrics"]["rmse"].as_f64().unwrap() > 0.0);
    assert!(eval_dir.join("predictions.csv").is_file());
}

#[test]
fn pipeline_config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let out = tmp.path().join("run");
    let config = tmp.path().join("config.json");
    let body = serde_json::json!({
        "dataset": data,
        "kpi": "Y4",
        "embedding_dim": 2,
        "max_delay": 20,
        "neg_window": 5,
        "candidates": 8,
        "output_dir": out,
    });
    fs::write(&config, body.to_string()).unwrap();

    let first = json(&run(&["pipeline", "--config", p(&config), "--max-delay", "15"]));
    let written: Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["max_delay"], 15);
    assert_eq!(written["neg_window"], 5);
    assert!(first["cache_hits"].as_array().unwrap().is_empty());
    for name in ["curves.csv", "selection.json", "metrics.csv", "predictions.csv", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }

    let second = json(&run(&["pipeline", "--config", p(&config), "--max-delay", "15"]));
    assert_eq!(first["config_hash"], second["config_hash"]);
    assert_eq!(second["cache_hits"], serde_json::json!(["inference"]));

    fs::write(&config, r#"{"kpi": "Y4", "bogus": 1}"#).unwrap();
    assert_eq!(code(&run(&["pipeline", "--config", p(&config)])), 1);
}

#[test]
fn compare_metrics_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    let rows = |vals: &[f64]| {
        let mut s = String::from("name,r2,rmse,mae\n");
        for (i, v) in vals.iter().enumerate() {
            s += &format!("run{i},0.9,{v},0.1\n");
        }
        s
    };
    fs::write(&a, rows(&[0.10, 0.12, 0.11, 0.13, 0.09, 0.14, 0.10, 0.12])).unwrap();
    fs::write(&b, rows(&[0.15, 0.16, 0.12, 0.18, 0.13, 0.17, 0.16, 0.15])).unwrap();
    let res = json(&run(&["compare", p(&a), p(&b)]));
    assert_eq!(res["n"], 8);
    assert_eq!(res["exact"], true);
    assert_eq!(res["r_plus"], 0.0);
    assert!((res["p_value"].as_f64().unwrap() - 2.0 / 256.0).abs() < 1e-15);

    assert_eq!(code(&run(&["compare", p(&a), p(&a)])), 2);
    assert_eq!(code(&run(&["compare", p(&a), p(&b), "--metric", "nope"])), 2);
}
