use std::fs;
use std::path::Path;

use causal_xmap::crossmap::CausalCurve;
use causal_xmap::pipeline::{
    emit_curve_plots_data, execute, run_pipeline, run_pipeline_on, ArtifactDir, RunConfig, SweepRange,
};
use causal_xmap::synthetic::{generate, SystemSpec};
use causal_xmap::timeseries::{write_csv, Dataset, TimeSeries};
use causal_xmap::ErrorKind;

fn chain(seed: u64) -> Dataset {
    generate(&SystemSpec::chain(seed).with_length(800)).unwrap().dataset
}

fn small_config() -> RunConfig {
    RunConfig {
        kpi: "Y4".into(),
        embedding_dim: Some(2),
        max_delay: 20,
        neg_window: 5,
        candidates: 10,
        test_size: Some(200),
        ..RunConfig::default()
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        output_dir: tmp.path().join("run"),
        embedding_dim: None,
        sweep: Some(SweepRange { start: 300, end: 400, step: 50 }),
        ..small_config()
    };
    let manifest = run_pipeline_on(&chain(1), "digest", &cfg).unwrap();
    for name in [
        "config.json",
        "embedding.json",
        "curves.csv",
        "delays.json",
        "selection.json",
        "features.csv",
        "thresholds.csv",
        "model.json",
        "metrics.csv",
        "predictions.csv",
        "sweep.json",
        "sweep.csv",
        "manifest.json",
    ] {
        assert!(cfg.output_dir.join(name).is_file(), "{name} missing");
        assert!(manifest.artifacts.iter().any(|a| a == name), "{name} not in manifest");
    }
    let metrics = String::from_utf8(read(&cfg.output_dir, "metrics.csv")).unwrap();
    assert!(metrics.starts_with("name,r2,rmse,mae"));
    assert!(metrics.contains("\nselected,") && metrics.contains("\nall_features,"));
    let preds = String::from_utf8(read(&cfg.output_dir, "predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 200);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = chain(2);
    let a = RunConfig {
        output_dir: tmp.path().join("a"),
        ..small_config()
    };
    let b = RunConfig {
        output_dir: tmp.path().join("b"),
        ..small_config()
    };
    let ma = run_pipeline_on(&ds, "d", &a).unwrap();
    let mb = run_pipeline_on(&ds, "d", &b).unwrap();
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.artifacts, mb.artifacts);
    for name in ma.artifacts.iter().filter(|n| *n != "manifest.json" && *n != "config.json") {
        assert_eq!(read(&a.output_dir, name), read(&b.output_dir, name), "{name} differs");
    }
}

#[test]
fn cache_is_reused_without_changing_results() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = chain(3);
    let cfg = RunConfig {
        output_dir: tmp.path().join("run"),
        cache_dir: Some(tmp.path().join("cache")),
        embedding_dim: None,
        ..small_config()
    };
    let first = run_pipeline_on(&ds, "d", &cfg).unwrap();
    assert!(first.cache_hits.is_empty());
    let before = read(&cfg.output_dir, "selection.json");
    let second = run_pipeline_on(&ds, "d", &cfg).unwrap();
    assert_eq!(second.cache_hits, vec!["embed-dim", "inference"]);
    assert_eq!(before, read(&cfg.output_dir, "selection.json"));

    // A different delay range must not hit the inference entry.
    let wider = RunConfig {
        max_delay: 21,
        ..cfg
    };
    let third = run_pipeline_on(&ds, "d", &wider).unwrap();
    assert_eq!(third.cache_hits, vec!["embed-dim"]);
}

#[test]
fn test_segment_read_once_per_evaluation() {
    let ds = chain(4);
    let plain = execute(&ds, &small_config(), None).unwrap();
    assert_eq!(plain.test_reads, 2);
    let no_base = RunConfig {
        baseline: false,
        ..small_config()
    };
    assert_eq!(execute(&ds, &no_base, None).unwrap().test_reads, 1);
    let swept = RunConfig {
        sweep: Some(SweepRange { start: 300, end: 450, step: 50 }),
        ..no_base
    };
    let out = execute(&ds, &swept, None).unwrap();
    assert_eq!(out.sweep.as_ref().unwrap().points.len(), 4);
    assert_eq!(out.test_reads, 1 + 4);
}

#[test]
fn test_values_do_not_influence_training() {
    let ds = chain(5);
    let cfg = small_config();
    let start = ds.len() - 200 + 1;
    let columns = ds
        .columns()
        .iter()
        .map(|c| {
            let v = c
                .values()
                .iter()
                .enumerate()
                .map(|(i, &x)| if i + 1 >= start { 1.0 - x } else { x })
                .collect();
            TimeSeries::new(c.name(), v).unwrap()
        })
        .collect();
    let altered = Dataset::new(columns, ds.kpi_index()).unwrap();
    let a = execute(&ds, &cfg, None).unwrap();
    let b = execute(&altered, &cfg, None).unwrap();
    assert_eq!(a.layout.test_start, start);
    assert_eq!(a.analysis.tdccm, b.analysis.tdccm);
    assert_eq!(a.selection.features, b.selection.features);
    assert_eq!(a.sensor, b.sensor);
    assert_ne!(a.test.metrics, b.test.metrics);
}

#[test]
fn failing_stage_is_named_and_keeps_earlier_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = chain(6);
    let mut columns = ds.columns().to_vec();
    columns[ds.kpi_index()] = TimeSeries::new("Y4", vec![0.5; ds.len()]).unwrap();
    let flat = Dataset::new(columns, ds.kpi_index()).unwrap();
    let cfg = RunConfig {
        output_dir: tmp.path().join("run"),
        ..small_config()
    };
    let err = run_pipeline_on(&flat, "d", &cfg).unwrap_err();
    assert!(err.to_string().contains("inference"), "{err}");
    assert!(cfg.output_dir.join("config.json").is_file());
    assert!(!cfg.output_dir.join("curves.csv").exists());
}

#[test]
fn loads_from_csv_and_records_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("data.csv");
    write_csv(&chain(7), fs::File::create(&path).unwrap()).unwrap();
    let cfg = RunConfig {
        dataset: Some(path.clone()),
        output_dir: tmp.path().join("run"),
        ..small_config()
    };
    let m = run_pipeline(&cfg).unwrap();
    let digest = causal_xmap::pipeline::sha256_hex(&fs::read(&path).unwrap());
    assert_eq!(m.input_digest, digest);

    let missing = RunConfig {
        kpi: "nope".into(),
        ..cfg
    };
    let err = run_pipeline(&missing).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(err.to_string().contains("ingest"), "{err}");
}

#[test]
fn curve_rows_match_delay_ranges() {
    let curve = |first: isize, n: usize| CausalCurve {
        cause: "a".into(),
        effect: "b".into(),
        first_delay: first,
        strengths: (0..n).map(|i| if i == 2 { None } else { Some(i as f64 / 10.0) }).collect(),
        dim: 2,
        tau: 1,
        series_len: 50,
    };
    let (c1, c2) = (curve(-3, 9), curve(0, 6));
    let mut buf = Vec::new();
    emit_curve_plots_data(&[("tdccm", &c1), ("tdpcm", &c2)], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "cause,effect,delay,strength,method");
    assert_eq!(lines.len(), 1 + 9 + 6);
    assert_eq!(lines[1], "a,b,-3,0,tdccm");
    assert_eq!(lines[3], "a,b,-1,,tdccm");
    assert!(lines[10].starts_with("a,b,0,") && lines[10].ends_with(",tdpcm"));
}

#[test]
fn artifact_dir_tracks_writes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = ArtifactDir::create(tmp.path().join("x")).unwrap();
    dir.write_json("a.json", &vec![1, 2]).unwrap();
    dir.write_bytes("b.txt", b"hi").unwrap();
    assert_eq!(dir.written(), vec!["a.json", "b.txt"]);
}
