//! End-to-end run: embedding dimension, causal inference, threshold
//! optimisation, final fit and test evaluation, with per-run artifacts and a
//! content-keyed cache for the expensive stages.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crossmap::CausalCurve;
use crate::embedding::{select_embedding_dim, EmbeddingConfig, EmbeddingSelection, FnnConfig};
use crate::error::{Error, Result};
use crate::inference::{analyze, CausalAnalysis, InferenceConfig};
use crate::selection::{
    build_threshold_candidates, optimize_threshold, selection_curves, Mode, SelectionConfig,
    SelectionResult,
};
use crate::soft_sensor::{stability_sweep, Evaluation, HeldOutSet, Metrics, SoftSensor, StabilitySweep};
use crate::timeseries::{load_csv, Dataset, FeatureSet, SplitSpec};

/// Training sizes `start, start+step, …, ≤ end` (supervised rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRange {
    pub start: usize,
    pub end: usize,
    pub step: usize,
}

impl SweepRange {
    pub fn sizes(&self) -> Vec<usize> {
        (self.start..=self.end).step_by(self.step.max(1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub kpi: String,
    /// `None` selects E by false nearest neighbours.
    pub embedding_dim: Option<usize>,
    pub tau: usize,
    pub fnn_e_max: usize,
    pub fnn_threshold: f64,
    pub max_delay: usize,
    pub neg_window: usize,
    /// Number of evenly spaced threshold candidates.
    pub candidates: usize,
    pub mode: Mode,
    pub n_components: usize,
    pub pre_delay_extension: usize,
    pub synchrony_filter: bool,
    /// Rows at the end held out for testing; defaults to a quarter of the data.
    pub test_size: Option<usize>,
    /// Supervised training rows; defaults to 90% of the pre-test rows.
    pub train_size: Option<usize>,
    pub sweep: Option<SweepRange>,
    /// Also fit on every lag `1..=max_delay` of every auxiliary for comparison.
    pub baseline: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            kpi: String::new(),
            embedding_dim: None,
            tau: 1,
            fnn_e_max: 10,
            fnn_threshold: 0.05,
            max_delay: 100,
            neg_window: 50,
            candidates: 20,
            mode: Mode::Tdpcm,
            n_components: 3,
            pre_delay_extension: 0,
            synchrony_filter: true,
            test_size: None,
            train_size: None,
            sweep: None,
            baseline: true,
            seed: 0,
            output_dir: PathBuf::from("run"),
            cache_dir: None,
        }
    }
}

impl RunConfig {
    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kpi.is_empty() {
            return bad("kpi name is required".into());
        }
        if self.embedding_dim == Some(0) {
            return bad("embedding_dim must be at least 1".into());
        }
        if self.tau == 0 {
            return bad("tau must be at least 1".into());
        }
        if self.fnn_e_max < 2 {
            return bad("fnn_e_max must be at least 2".into());
        }
        if !(self.fnn_threshold > 0.0 && self.fnn_threshold <= 1.0) {
            return bad(format!("fnn_threshold {} outside (0, 1]", self.fnn_threshold));
        }
        if self.max_delay == 0 {
            return bad("max_delay must be at least 1".into());
        }
        if self.candidates < 2 {
            return bad("candidates must be at least 2".into());
        }
        if self.n_components == 0 {
            return bad("n_components must be at least 1".into());
        }
        if self.test_size == Some(0) || self.train_size == Some(0) {
            return bad("test_size and train_size must be positive".into());
        }
        if let Some(s) = self.sweep {
            if s.step == 0 || s.start == 0 || s.start > s.end {
                return bad(format!("invalid sweep range {s:?}"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output locations blanked.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// Row counts of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLayout {
    pub series_len: usize,
    /// First time label of the test segment.
    pub test_start: usize,
    /// Supervised rows before the test segment.
    pub supervised_rows: usize,
    pub split: SplitSpec,
}

pub fn layout(len: usize, cfg: &RunConfig) -> Result<RunLayout> {
    let test = cfg.test_size.unwrap_or(len / 4);
    if test < 2 || test >= len {
        return Err(Error::Config(format!("test size {test} does not fit {len} rows")));
    }
    let pre = len - test;
    if pre <= cfg.max_delay + 2 {
        return Err(Error::Config(format!(
            "{pre} pre-test rows leave no supervised rows with max delay {}",
            cfg.max_delay
        )));
    }
    let rows = pre - cfg.max_delay;
    let train = cfg.train_size.unwrap_or(rows * 9 / 10);
    let split = SplitSpec::new(train, rows);
    split.validate(rows)?;
    if let Some(s) = cfg.sweep {
        if s.end >= rows {
            return Err(Error::Config(format!(
                "sweep size {} leaves no validation rows out of {rows}",
                s.end
            )));
        }
    }
    Ok(RunLayout {
        series_len: len,
        test_start: pre + 1,
        supervised_rows: rows,
        split,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub layout: RunLayout,
    pub embedding: EmbeddingConfig,
    pub embedding_selection: Option<EmbeddingSelection>,
    pub analysis: CausalAnalysis,
    pub selection: SelectionResult,
    pub sensor: SoftSensor,
    pub test: Evaluation,
    pub baseline: Option<Metrics>,
    pub sweep: Option<StabilitySweep>,
    /// How often the test targets were read.
    pub test_reads: usize,
    pub cache_hits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub input_digest: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub artifacts: Vec<String>,
    pub cache_hits: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of column names and the exact bits of every value.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.kpi_index() as u64).to_le_bytes());
    for c in ds.columns() {
        h.update(c.name().as_bytes());
        h.update([0]);
        for v in c.values() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Output directory that records what was written to it.
#[derive(Debug)]
pub struct ArtifactDir {
    root: PathBuf,
    written: Mutex<Vec<String>>,
}

impl ArtifactDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            written: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn written(&self) -> Vec<String> {
        self.written.lock().expect("artifact log").clone()
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let mut w = self.written.lock().expect("artifact log");
        if !w.iter().any(|n| n == name) {
            w.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Writes a CSV produced by `fill`.
    pub fn write_csv(&self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write_bytes(name, &buf)
    }
}

/// Loads `stage-key.json` from `dir` or computes and stores it. Returns
/// whether the value came from the cache.
pub fn cached<T, F>(dir: Option<&Path>, stage: &str, key: &str, compute: F) -> Result<(T, bool)>
where
    T: Serialize + DeserializeOwned,
    F: FnOnce() -> Result<T>,
{
    let Some(dir) = dir else {
        return Ok((compute()?, false));
    };
    let path = dir.join(format!("{stage}-{key}.json"));
    if let Ok(bytes) = fs::read(&path) {
        match serde_json::from_slice(&bytes) {
            Ok(v) => return Ok((v, true)),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    let value = compute()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, serde_json::to_vec(&value)?).map_err(|e| Error::io(&path, e))?;
    Ok((value, false))
}

fn stage_key(data_digest: &str, config: &impl Serialize) -> String {
    let mut bytes = data_digest.as_bytes().to_vec();
    bytes.extend(serde_json::to_vec(config).expect("stage config serialises"));
    sha256_hex(&bytes)[..32].to_string()
}

/// Long-format rows `cause,effect,delay,strength,method`; undefined
/// strengths are left empty.
pub fn emit_curve_plots_data<W: Write>(curves: &[(&str, &CausalCurve)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cause", "effect", "delay", "strength", "method"])?;
    for (method, c) in curves {
        for (delay, s) in c.iter() {
            w.write_record([
                c.cause.as_str(),
                c.effect.as_str(),
                &delay.to_string(),
                &s.map(|v| v.to_string()).unwrap_or_default(),
                method,
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Curves of every auxiliary on the KPI, tagged by method.
pub fn kpi_curves(analysis: &CausalAnalysis) -> Vec<(&'static str, &CausalCurve)> {
    analysis
        .tdccm
        .iter()
        .map(|c| ("tdccm", c))
        .chain(analysis.tdpcm.iter().map(|t| ("tdpcm", &t.curve)))
        .collect()
}

pub fn write_features_csv<W: Write>(ds: &Dataset, features: &FeatureSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "lag"])?;
    for f in features {
        w.write_record([ds.column(f.var).name(), &f.lag.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_features_csv<R: std::io::Read>(ds: &Dataset, reader: R) -> Result<FeatureSet> {
    let mut r = csv::Reader::from_reader(reader);
    let mut set = FeatureSet::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let (Some(name), Some(lag)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Data(format!("feature row {row} needs variable and lag")));
        };
        let var = ds
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("feature row {row}: unknown variable {name:?}")))?;
        let lag = lag
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("feature row {row}: bad lag {lag:?}")))?;
        set.insert(crate::timeseries::FeatureId::new(var, lag));
    }
    Ok(set)
}

pub fn write_predictions_csv<W: Write>(eval: &Evaluation, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "actual", "predicted"])?;
    for p in &eval.predictions {
        w.write_record([p.label.to_string(), p.actual.to_string(), p.predicted.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `name,r2,rmse,mae` rows.
pub fn write_metrics_csv<W: Write>(rows: &[(String, Metrics)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["name", "r2", "rmse", "mae"])?;
    for (name, m) in rows {
        w.write_record([
            name.clone(),
            m.r2.map(|v| v.to_string()).unwrap_or_default(),
            m.rmse.to_string(),
            m.mae.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn select_and_fit(
    history: &Dataset,
    analysis: &CausalAnalysis,
    cfg: &RunConfig,
    split: SplitSpec,
) -> Result<(SelectionResult, SoftSensor)> {
    let curves = selection_curves(analysis, cfg.mode);
    let candidates = build_threshold_candidates(&curves, cfg.max_delay, cfg.candidates)?;
    let sel_cfg = SelectionConfig {
        max_delay: cfg.max_delay,
        n_components: cfg.n_components,
        pre_delay_extension: cfg.pre_delay_extension,
    };
    let selection = optimize_threshold(history, &curves, &candidates, split, cfg.mode, &sel_cfg)?;
    let sensor = SoftSensor::fit(
        history,
        &selection.features,
        cfg.max_delay,
        1..=split.validation_end,
        cfg.n_components,
    )?;
    Ok((selection, sensor))
}

/// Runs every stage on an in-memory dataset. With `out`, intermediate
/// results are written as they are produced, so a failing stage leaves the
/// earlier artifacts behind.
pub fn execute(ds: &Dataset, cfg: &RunConfig, out: Option<&ArtifactDir>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let layout = layout(ds.len(), cfg)?;
    let held_out = HeldOutSet::new(ds.clone(), layout.test_start)?;
    let history = held_out.history()?;
    let digest = dataset_digest(&history);
    let cache_dir = out.map(|_| cfg.cache_path());
    let cache = cache_dir.as_deref();
    let mut cache_hits = Vec::new();

    let (embedding, embedding_selection) = match cfg.embedding_dim {
        Some(dim) => (EmbeddingConfig::new(dim, cfg.tau)?, None),
        None => {
            let fnn = FnnConfig {
                tau: cfg.tau,
                e_max: cfg.fnn_e_max,
                ..FnnConfig::default()
            };
            let key = stage_key(&digest, &(fnn, cfg.fnn_threshold));
            let (sel, hit): (EmbeddingSelection, bool) = stage(
                "embed-dim",
                cached(cache, "embedding", &key, || {
                    select_embedding_dim(&history, fnn, cfg.fnn_threshold)
                }),
            )?;
            if hit {
                cache_hits.push("embed-dim".to_string());
            }
            log::info!("embedding dimension E={} (tau={})", sel.dim, cfg.tau);
            (EmbeddingConfig::new(sel.dim, cfg.tau)?, Some(sel))
        }
    };
    if let (Some(o), Some(sel)) = (out, &embedding_selection) {
        o.write_json("embedding.json", sel)?;
    }

    let mut inf_cfg = InferenceConfig::new(embedding, cfg.max_delay, cfg.neg_window);
    inf_cfg.synchrony_filter = cfg.synchrony_filter;
    let key = stage_key(&digest, &inf_cfg);
    let (analysis, hit): (CausalAnalysis, bool) =
        stage("inference", cached(cache, "inference", &key, || analyze(&history, &inf_cfg)))?;
    if hit {
        cache_hits.push("inference".to_string());
    }
    if let Some(o) = out {
        o.write_csv("curves.csv", |b| emit_curve_plots_data(&kpi_curves(&analysis), b))?;
        o.write_json(
            "delays.json",
            &serde_json::json!({
                "resolution": analysis.resolution,
                "excluded_disturbers": analysis.exclusions,
            }),
        )?;
    }

    let (selection, sensor) = stage("select", select_and_fit(&history, &analysis, cfg, layout.split))?;
    log::info!(
        "threshold {:.4} selects {} features",
        selection.c_best,
        selection.features.len()
    );
    if let Some(o) = out {
        o.write_json("selection.json", &selection)?;
        o.write_csv("features.csv", |b| write_features_csv(&history, &selection.features, b))?;
        o.write_csv("thresholds.csv", |b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["threshold", "validation_rmse", "n_features"])?;
            for s in &selection.scores {
                w.write_record([
                    s.threshold.to_string(),
                    s.rmse.map(|v| v.to_string()).unwrap_or_else(|| "inf".into()),
                    s.n_features.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io("<csv>", e))?;
            Ok(())
        })?;
        o.write_json("model.json", &sensor)?;
    }

    let test = stage("evaluate", held_out.score(&sensor))?;
    let baseline = if cfg.baseline {
        let all = FeatureSet::all_lags(&history, cfg.max_delay);
        let b = stage(
            "baseline",
            SoftSensor::fit(&history, &all, cfg.max_delay, 1..=layout.split.validation_end, cfg.n_components),
        )?;
        Some(stage("baseline", held_out.score(&b))?.metrics)
    } else {
        None
    };
    if let Some(o) = out {
        let mut rows = vec![("selected".to_string(), test.metrics)];
        rows.extend(baseline.map(|m| ("all_features".to_string(), m)));
        o.write_csv("metrics.csv", |b| write_metrics_csv(&rows, b))?;
        o.write_csv("predictions.csv", |b| write_predictions_csv(&test, b))?;
    }

    let sweep = match cfg.sweep {
        None => None,
        Some(range) => {
            let sizes = range.sizes();
            let s = stage(
                "sweep",
                stability_sweep(&sizes, &held_out, |n| {
                    let split = SplitSpec::new(n, layout.supervised_rows);
                    select_and_fit(&history, &analysis, cfg, split).map(|(_, s)| s)
                }),
            )?;
            if let Some(o) = out {
                o.write_json("sweep.json", &s)?;
                let rows: Vec<(String, Metrics)> = s
                    .points
                    .iter()
                    .map(|p| (format!("train_{}", p.train_size), p.metrics))
                    .collect();
                o.write_csv("sweep.csv", |b| write_metrics_csv(&rows, b))?;
            }
            Some(s)
        }
    };

    Ok(PipelineOutcome {
        layout,
        embedding,
        embedding_selection,
        analysis,
        selection,
        sensor,
        test,
        baseline,
        sweep,
        test_reads: held_out.reads(),
        cache_hits,
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Loads the configured CSV, runs every stage and writes the artifacts plus
/// `manifest.json` into the output directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("dataset path is required".into()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = stage("ingest", load_csv(path, &cfg.kpi))?;
    run_pipeline_on(&ds, &sha256_hex(&bytes), cfg)
}

/// As [`run_pipeline`] for data already in memory; `input_digest` is
/// recorded in the manifest.
pub fn run_pipeline_on(ds: &Dataset, input_digest: &str, cfg: &RunConfig) -> Result<RunManifest> {
    let started_at = unix_now();
    let out = ArtifactDir::create(&cfg.output_dir)?;
    out.write_json("config.json", cfg)?;
    let outcome = execute(ds, cfg, Some(&out))?;
    let mut manifest = RunManifest {
        config_hash: cfg.config_hash(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        input_digest: input_digest.to_string(),
        started_at,
        finished_at: unix_now(),
        artifacts: out.written(),
        cache_hits: outcome.cache_hits,
    };
    manifest.artifacts.push("manifest.json".into());
    out.write_json("manifest.json", &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_defaults() {
        let cfg = RunConfig {
            kpi: "x".into(),
            test_size: Some(598),
            ..RunConfig::default()
        };
        let l = layout(2194, &cfg).unwrap();
        assert_eq!(l.test_start, 1597);
        assert_eq!(l.supervised_rows, 1496);
        assert_eq!(l.split.train_end, 1346);
        let fixed = RunConfig {
            train_size: Some(1350),
            ..cfg.clone()
        };
        assert_eq!(layout(2194, &fixed).unwrap().split.train_end, 1350);
        let too_big = RunConfig {
            train_size: Some(1496),
            ..cfg
        };
        assert!(layout(2194, &too_big).is_err());
    }

    #[test]
    fn config_hash_ignores_output_location() {
        let a = RunConfig {
            kpi: "x".into(),
            ..RunConfig::default()
        };
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig {
            max_delay: 50,
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn validation_catches_bad_fields() {
        assert!(RunConfig::default().validate().is_err());
        let ok = RunConfig {
            kpi: "x".into(),
            ..RunConfig::default()
        };
        ok.validate().unwrap();
        for bad in [
            RunConfig { tau: 0, ..ok.clone() },
            RunConfig { candidates: 1, ..ok.clone() },
            RunConfig { embedding_dim: Some(0), ..ok.clone() },
            RunConfig { fnn_threshold: 0.0, ..ok.clone() },
            RunConfig {
                sweep: Some(SweepRange { start: 10, end: 5, step: 1 }),
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn empty_curve_set_writes_header() {
        let mut buf = Vec::new();
        emit_curve_plots_data(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "cause,effect,delay,strength,method\n");
    }

    #[test]
    fn sweep_sizes() {
        let s = SweepRange { start: 1000, end: 1400, step: 100 };
        assert_eq!(s.sizes(), vec![1000, 1100, 1200, 1300, 1400]);
    }
}
