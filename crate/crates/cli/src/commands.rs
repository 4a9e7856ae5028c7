use std::fs::File;
use std::path::Path;

use serde_json::json;

use causal_xmap::crossmap::{tdccm_curve, CrossMapper};
use causal_xmap::embedding::{embed, select_embedding_dim, EmbeddingConfig, FnnConfig};
use causal_xmap::inference::{analyze, CausalAnalysis, InferenceConfig};
use causal_xmap::partial::optimal_delay;
use causal_xmap::pipeline::{
    emit_curve_plots_data, kpi_curves, layout, read_features_csv, run_pipeline, write_features_csv,
    write_metrics_csv, write_predictions_csv, ArtifactDir, RunConfig, RunLayout,
};
use causal_xmap::selection::{build_threshold_candidates, optimize_threshold, selection_curves, SelectionConfig};
use causal_xmap::soft_sensor::{wilcoxon_signed_rank, HeldOutSet, SoftSensor};
use causal_xmap::synthetic::{generate, SystemSpec};
use causal_xmap::timeseries::{load_csv, normalize_minmax, write_csv, Dataset};
use causal_xmap::Error;

use crate::{CompareArgs, RunArgs, SynthArgs, TrainEvalArgs};

type Result<T> = std::result::Result<T, Error>;

fn print(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

struct Prepared {
    cfg: RunConfig,
    data: Dataset,
    layout: RunLayout,
    out: Option<ArtifactDir>,
}

impl Prepared {
    /// Rows before the test segment.
    fn history(&self) -> Result<Dataset> {
        self.data.slice_rows(1..=self.layout.test_start - 1)
    }
}

fn load(a: &RunArgs) -> Result<(RunConfig, Dataset)> {
    let cfg = a.resolve()?;
    let path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let data = load_csv(&path, &cfg.kpi)?;
    Ok((cfg, data))
}

fn prepare(a: &RunArgs) -> Result<Prepared> {
    let (cfg, data) = load(a)?;
    let layout = layout(data.len(), &cfg)?;
    let out = if a.out.is_some() || a.config.is_some() {
        let dir = ArtifactDir::create(&cfg.output_dir)?;
        dir.write_json("config.json", &cfg)?;
        Some(dir)
    } else {
        None
    };
    Ok(Prepared { cfg, data, layout, out })
}

fn embedding(cfg: &RunConfig, history: &Dataset, out: Option<&ArtifactDir>) -> Result<EmbeddingConfig> {
    match cfg.embedding_dim {
        Some(dim) => EmbeddingConfig::new(dim, cfg.tau),
        None => {
            let fnn = FnnConfig {
                tau: cfg.tau,
                e_max: cfg.fnn_e_max,
                ..FnnConfig::default()
            };
            let sel = select_embedding_dim(history, fnn, cfg.fnn_threshold)?;
            if let Some(o) = out {
                o.write_json("embedding.json", &sel)?;
            }
            EmbeddingConfig::new(sel.dim, cfg.tau)
        }
    }
}

fn inference(p: &Prepared) -> Result<(Dataset, CausalAnalysis)> {
    let history = p.history()?;
    let e = embedding(&p.cfg, &history, p.out.as_ref())?;
    let mut inf = InferenceConfig::new(e, p.cfg.max_delay, p.cfg.neg_window);
    inf.synchrony_filter = p.cfg.synchrony_filter;
    let analysis = analyze(&history, &inf)?;
    Ok((history, analysis))
}

pub fn ingest(a: &RunArgs) -> Result<()> {
    let (cfg, data) = load(a)?;
    let (scaled, params) = normalize_minmax(&data);
    if a.out.is_some() {
        let dir = ArtifactDir::create(&cfg.output_dir)?;
        dir.write_csv("normalized.csv", |b| write_csv(&scaled, b))?;
        dir.write_json("normalization.json", &params)?;
    }
    print(&json!({
        "rows": data.len(),
        "columns": data.names(),
        "kpi": data.kpi().name(),
        "auxiliaries": data.aux_count(),
        "constant_columns": params.constant_columns(),
    }));
    Ok(())
}

pub fn embed_dim(a: &RunArgs) -> Result<()> {
    let p = prepare(a)?;
    let history = p.history()?;
    let fnn = FnnConfig {
        tau: p.cfg.tau,
        e_max: p.cfg.fnn_e_max,
        ..FnnConfig::default()
    };
    let sel = select_embedding_dim(&history, fnn, p.cfg.fnn_threshold)?;
    if let Some(o) = &p.out {
        o.write_json("embedding.json", &sel)?;
        o.write_csv("fnn.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["variable", "dim", "fnn_fraction"])?;
            for prof in &sel.profiles {
                for (i, f) in prof.fractions.iter().enumerate() {
                    w.write_record([prof.name.clone(), (i + 1).to_string(), f.to_string()])?;
                }
            }
            w.flush().map_err(|e| Error::Io {
                path: "fnn.csv".into(),
                source: e,
            })
        })?;
    }
    print(&json!({ "dim": sel.dim, "tau": p.cfg.tau, "threshold": sel.threshold, "skipped": sel.skipped }));
    Ok(())
}

pub fn tdccm(a: &RunArgs) -> Result<()> {
    let p = prepare(a)?;
    let history = p.history()?;
    let e = embedding(&p.cfg, &history, p.out.as_ref())?;
    let mapper = CrossMapper::new(embed(history.kpi(), e)?)?;
    let mut curves = Vec::new();
    for i in history.aux_indices() {
        let col = history.column(i);
        if col.is_constant() {
            log::warn!("skipping constant auxiliary {:?}", col.name());
            continue;
        }
        curves.push(tdccm_curve(&mapper, col, p.cfg.max_delay, p.cfg.neg_window)?);
    }
    let delays: Vec<_> = curves
        .iter()
        .map(|c| {
            let d = optimal_delay(c);
            json!({
                "cause": c.cause,
                "effect": c.effect,
                "delay": d.delay,
                "strength": d.strength,
                "synchrony": d.synchrony,
                "peak": c.peak().map(|(d, s)| json!({"delay": d, "strength": s})),
            })
        })
        .collect();
    if let Some(o) = &p.out {
        let tagged: Vec<_> = curves.iter().map(|c| ("tdccm", c)).collect();
        o.write_csv("curves.csv", |b| emit_curve_plots_data(&tagged, b))?;
        o.write_json("delays.json", &delays)?;
    }
    print(&json!({ "dim": e.dim, "tau": e.tau, "pairs": delays }));
    Ok(())
}

fn summary(analysis: &CausalAnalysis) -> serde_json::Value {
    let rows: Vec<_> = (0..analysis.aux_names.len())
        .map(|j| {
            let r = &analysis.resolution;
            json!({
                "cause": analysis.aux_names[j],
                "tdccm_delay": r.to_kpi[j].choice.delay,
                "synchrony": r.to_kpi[j].choice.synchrony,
                "tdpcm_delay": r.direct[j].choice.delay,
                "tdpcm_strength": r.direct[j].choice.strength,
                "conditioned_on": analysis.tdpcm[j].conditioned_on,
            })
        })
        .collect();
    json!({
        "kpi": analysis.kpi,
        "dim": analysis.config.embedding.dim,
        "tau": analysis.config.embedding.tau,
        "pairs": rows,
        "excluded_disturbers": analysis.exclusions.len(),
    })
}

pub fn tdpcm(a: &RunArgs) -> Result<()> {
    let p = prepare(a)?;
    let (_, analysis) = inference(&p)?;
    if let Some(o) = &p.out {
        o.write_csv("curves.csv", |b| emit_curve_plots_data(&kpi_curves(&analysis), b))?;
        o.write_json("delays.json", &analysis.resolution)?;
        o.write_json("excluded.json", &analysis.exclusions)?;
        o.write_json("inference.json", &analysis)?;
    }
    print(&summary(&analysis));
    Ok(())
}

pub fn select(a: &RunArgs) -> Result<()> {
    let p = prepare(a)?;
    let (history, analysis) = inference(&p)?;
    let curves = selection_curves(&analysis, p.cfg.mode);
    let candidates = build_threshold_candidates(&curves, p.cfg.max_delay, p.cfg.candidates)?;
    let sel_cfg = SelectionConfig {
        max_delay: p.cfg.max_delay,
        n_components: p.cfg.n_components,
        pre_delay_extension: p.cfg.pre_delay_extension,
    };
    let result = optimize_threshold(&history, &curves, &candidates, p.layout.split, p.cfg.mode, &sel_cfg)?;
    if let Some(o) = &p.out {
        o.write_json("selection.json", &result)?;
        o.write_csv("features.csv", |b| write_features_csv(&history, &result.features, b))?;
        o.write_csv("thresholds.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["threshold", "validation_rmse", "n_features"])?;
            for s in &result.scores {
                w.write_record([
                    s.threshold.to_string(),
                    s.rmse.map(|v| v.to_string()).unwrap_or_else(|| "inf".into()),
                    s.n_features.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::Io {
                path: "thresholds.csv".into(),
                source: e,
            })
        })?;
    }
    let windows: Vec<_> = curves
        .iter()
        .map(|c| json!({ "variable": c.name, "delay": c.delay, "lags": result.features.lags_of(c.var) }))
        .collect();
    print(&json!({
        "mode": result.mode,
        "c_best": result.c_best,
        "n_features": result.features.len(),
        "variables": windows,
    }));
    Ok(())
}

pub fn train_eval(a: &TrainEvalArgs) -> Result<()> {
    let p = prepare(&a.run)?;
    let history = p.history()?;
    let file = File::open(&a.features).map_err(|e| Error::Io {
        path: a.features.clone(),
        source: e,
    })?;
    let features = read_features_csv(&history, file)?;
    let sensor = SoftSensor::fit(
        &history,
        &features,
        p.cfg.max_delay,
        1..=p.layout.split.validation_end,
        p.cfg.n_components,
    )?;
    let held_out = HeldOutSet::new(p.data.clone(), p.layout.test_start)?;
    let eval = held_out.score(&sensor)?;
    if let Some(o) = &p.out {
        o.write_json("model.json", &sensor)?;
        o.write_csv("metrics.csv", |b| write_metrics_csv(&[("test".to_string(), eval.metrics)], b))?;
        o.write_csv("predictions.csv", |b| write_predictions_csv(&eval, b))?;
    }
    print(&json!({
        "n_features": features.len(),
        "n_components": sensor.model.n_components,
        "test_rows": eval.predictions.len(),
        "metrics": eval.metrics,
    }));
    Ok(())
}

fn metric_column(path: &Path, metric: &str) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut r = csv::Reader::from_reader(file);
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == metric)
        .ok_or_else(|| Error::Data(format!("{} has no {metric:?} column", path.display())))?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let cell = rec.get(idx).unwrap_or("");
            cell.trim().parse::<f64>().map_err(|_| Error::BadCell {
                row: i + 1,
                column: metric.to_string(),
                value: cell.to_string(),
            })
        })
        .collect()
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let x = metric_column(&a.a, &a.metric)?;
    let y = metric_column(&a.b, &a.metric)?;
    let r = wilcoxon_signed_rank(&x, &y)?;
    print(&json!({
        "metric": a.metric,
        "pairs": x.len(),
        "n": r.n,
        "r_plus": r.r_plus,
        "r_minus": r.r_minus,
        "p_value": r.p_value,
        "median_delta": r.median_delta,
        "exact": r.exact,
    }));
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match a.topology.to_ascii_lowercase().as_str() {
        "chain" => SystemSpec::chain(a.seed),
        "fork" => SystemSpec::fork(a.seed),
        other => return Err(Error::Config(format!("unknown topology {other:?}; expected chain or fork"))),
    };
    if let Some(n) = a.noise {
        spec = spec.with_noise(n);
    }
    if let Some(l) = a.length {
        spec = spec.with_length(l);
    }
    if let Some(b) = a.burn_in {
        spec.burn_in = b;
    }
    spec.literal_eq = a.literal_eq;
    let data = generate(&spec)?;
    let dir = ArtifactDir::create(&a.out)?;
    dir.write_csv("data.csv", |b| write_csv(&data.dataset, b))?;
    let truth = json!({
        "edges": data.truth.edges,
        "kpi": spec.kpi_name(),
        "seed": spec.seed,
        "effective_seed": data.effective_seed,
        "spec": spec,
    });
    dir.write_json("truth.json", &truth)?;
    print(&json!({ "rows": data.dataset.len(), "kpi": spec.kpi_name(), "out": a.out }));
    Ok(())
}

pub fn pipeline(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let manifest = run_pipeline(&cfg)?;
    print(&serde_json::to_value(&manifest)?);
    Ok(())
}
