use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_xmap::pipeline::{RunConfig, SweepRange};
use causal_xmap::selection::Mode;
use causal_xmap::{Error, ErrorKind};

mod commands;

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "XMAP_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "xmap", version, about = "Time-delayed cross-mapping causal feature selection")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate a CSV; optionally write its min-max scaled copy.
    Ingest(RunArgs),
    /// Choose the embedding dimension by false nearest neighbours.
    EmbedDim(RunArgs),
    /// TDCCM curves of every auxiliary on the KPI.
    Tdccm(RunArgs),
    /// Full causal inference: TDCCM, delay resolution and TDPCM.
    Tdpcm(RunArgs),
    /// Threshold optimisation and the selected feature set.
    Select(RunArgs),
    /// Fit PLS on a feature manifest and evaluate on the test segment.
    TrainEval(TrainEvalArgs),
    /// Wilcoxon signed-rank test between two metrics CSVs.
    Compare(CompareArgs),
    /// Generate a coupled logistic benchmark.
    Synth(SynthArgs),
    /// Every stage end to end.
    Pipeline(RunArgs),
}

/// Options shared by the data-driven subcommands. Values given here override
/// the `--config` file.
#[derive(Debug, Args, Clone, Default)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub kpi: Option<String>,
    /// Embedding dimension, or "auto".
    #[arg(short = 'E', long = "embedding-dim")]
    pub embedding_dim: Option<String>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub e_max: Option<usize>,
    #[arg(long)]
    pub fnn_threshold: Option<f64>,
    #[arg(long)]
    pub max_delay: Option<usize>,
    #[arg(long)]
    pub neg_window: Option<usize>,
    /// Number of evenly spaced threshold candidates.
    #[arg(short = 'D', long = "candidates")]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub n_components: Option<usize>,
    #[arg(long)]
    pub pre_delay_extension: Option<usize>,
    #[arg(long)]
    pub disable_synchrony_filter: bool,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Training sizes for the stability sweep, as start:end:step.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &self.data {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.kpi {
            cfg.kpi = v.clone();
        }
        if let Some(v) = &self.embedding_dim {
            cfg.embedding_dim = if v.eq_ignore_ascii_case("auto") {
                None
            } else {
                Some(v.parse().map_err(|_| {
                    Error::Config(format!("embedding dim must be a positive integer or auto, got {v:?}"))
                })?)
            };
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(tau, fnn_threshold, max_delay, neg_window, candidates, mode, n_components, pre_delay_extension, seed);
        if let Some(v) = self.e_max {
            cfg.fnn_e_max = v;
        }
        if self.disable_synchrony_filter {
            cfg.synchrony_filter = false;
        }
        if self.test_size.is_some() {
            cfg.test_size = self.test_size;
        }
        if self.train_size.is_some() {
            cfg.train_size = self.train_size;
        }
        if let Some(s) = &self.sweep {
            cfg.sweep = Some(parse_sweep(s)?);
        }
        if self.no_baseline {
            cfg.baseline = false;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if self.cache_dir.is_some() {
            cfg.cache_dir = self.cache_dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_sweep(s: &str) -> Result<SweepRange, Error> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some([start, end, step]) => Ok(SweepRange {
            start: *start,
            end: *end,
            step: *step,
        }),
        _ => Err(Error::Config(format!("sweep must be start:end:step, got {s:?}"))),
    }
}

#[derive(Debug, Args, Clone)]
pub struct TrainEvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Feature manifest CSV (variable,lag).
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct CompareArgs {
    /// Metrics CSV of the first method.
    pub a: PathBuf,
    /// Metrics CSV of the second method, paired row by row.
    pub b: PathBuf,
    /// Column to compare.
    #[arg(long, default_value = "rmse")]
    pub metric: String,
}

#[derive(Debug, Args, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value = "chain")]
    pub topology: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measurement noise; defaults to the topology's own value.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Use `y2(t-1)` in place of `y3(t-1)` as the third variable's self term.
    #[arg(long)]
    pub literal_eq: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn configure_workers() -> Result<(), Error> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = configure_workers().and_then(|_| match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::EmbedDim(a) => commands::embed_dim(a),
        Command::Tdccm(a) => commands::tdccm(a),
        Command::Tdpcm(a) => commands::tdpcm(a),
        Command::Select(a) => commands::select(a),
        Command::TrainEval(a) => commands::train_eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Synth(a) => commands::synth(a),
        Command::Pipeline(a) => commands::pipeline(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
