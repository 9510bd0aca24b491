//! Command-line front end. Every command reads one JSON config carrying a
//! `schema_version`, writes its artifacts into the output directory and
//! finishes with a `manifest.json` listing them.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample, Dataset, InputLaw};
use crate::error::{HmoeError, Result};
use crate::estimation::{fit_mle, FitConfig};
use crate::metrics::{self, ComboLossOptions};
use crate::model::{GatingCombo, MeasureFile, MixingMeasure};
use crate::polysys::{search_nontrivial, PolyReport, PolySystem, SearchConfig};
use crate::quadrature::QuadSpec;
use crate::ratelab::{self, hex, Checkpoint, RateExperiment, Verdict};
use crate::routing::{self, RouteConfig, RouteParams, TokenBatch};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEGRADED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hmoe", version, about = "Hierarchical mixture of experts workbench")]
pub struct Cli {
    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "HMOE_THREADS")]
    pub threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from a ground-truth measure.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a model to a dataset CSV by maximum likelihood.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Distances between two measures (`g1` is treated as the estimate).
    Metrics {
        #[arg(long)]
        g1: PathBuf,
        #[arg(long)]
        g2: PathBuf,
        #[arg(long)]
        combo: GatingCombo,
        #[arg(long, default_value_t = metrics::DEFAULT_PROBES)]
        probes: usize,
    },
    /// Search for a non-trivial solution of a polynomial system.
    Polysys {
        #[arg(long)]
        kind: GatingCombo,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long, default_value_t = 200)]
        restarts: usize,
    },
    /// Run a convergence-rate experiment.
    Rates {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Route synthetic or CSV tokens through the two-level layer.
    RouteDemo {
        #[arg(long)]
        config: PathBuf,
        /// CSV of tokens (`x_0..x_{D-1}` and an optional `cluster` column).
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Fit { .. } => "fit",
            Command::Metrics { .. } => "metrics",
            Command::Polysys { .. } => "polysys",
            Command::Rates { .. } => "rates",
            Command::RouteDemo { .. } => "route-demo",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub combo: GatingCombo,
    /// Defaults to the built-in rate-experiment truth for `combo`.
    #[serde(default)]
    pub truth: Option<MixingMeasure>,
    pub n: usize,
    #[serde(default)]
    pub input_law: InputLaw,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCommandConfig {
    pub schema_version: u32,
    pub combo: GatingCombo,
    pub fit: FitConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    pub schema_version: u32,
    pub experiment: RateExperiment,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTokens {
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub clusters: usize,
    pub spread: f64,
    pub noise: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteDemoConfig {
    pub schema_version: u32,
    pub route: RouteConfig,
    pub tokens: SyntheticTokens,
    /// Every expert multiplies its input by this factor.
    #[serde(default = "one")]
    pub expert_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub exit_code: i32,
    pub wall_time_secs: f64,
    pub timestamp_unix: u64,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub hmoe: String,
    pub schema: u32,
}

/// An error before any work started: nothing is written.
struct ConfigError(String);

impl From<HmoeError> for ConfigError {
    fn from(e: HmoeError) -> Self {
        ConfigError(e.to_string())
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> std::result::Result<(T, String), ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    // Serde reports the line and column of syntax and type errors.
    let value: T = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    Ok((value, hex(&Sha256::digest(text.as_bytes()))))
}

fn check_version(v: u32) -> std::result::Result<(), ConfigError> {
    if v != SCHEMA_VERSION {
        return Err(ConfigError(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")));
    }
    Ok(())
}

/// A validated command, ready to run.
enum Job {
    Simulate(SimulateConfig),
    Fit(Dataset, FitCommandConfig),
    Metrics { g1: MeasureFile, g2: MeasureFile, combo: GatingCombo, probes: usize },
    Polysys(PolySystem, SearchConfig),
    Rates { exp: RateExperiment, resume: bool },
    RouteDemo { cfg: RouteDemoConfig, tokens: TokenBatch, labels: Vec<usize> },
}

fn prepare(cli: &Cli) -> std::result::Result<(Job, Option<String>, Option<u64>), ConfigError> {
    match &cli.command {
        Command::Simulate { config } => {
            let (mut c, hash): (SimulateConfig, _) = load_config(config)?;
            check_version(c.schema_version)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            if c.n == 0 {
                return Err(ConfigError("n must be at least 1".into()));
            }
            c.input_law.validate()?;
            c.truth.get_or_insert_with(|| ratelab::default_truth(c.combo)).validate()?;
            let seed = c.seed;
            Ok((Job::Simulate(c), Some(hash), Some(seed)))
        }
        Command::Fit { data, config } => {
            let (mut c, hash): (FitCommandConfig, _) = load_config(config)?;
            check_version(c.schema_version)?;
            if let Some(s) = cli.seed {
                c.fit.seed = s;
            }
            c.fit.validate()?;
            let ds = Dataset::load(data)?;
            let seed = c.fit.seed;
            Ok((Job::Fit(ds, c), Some(hash), Some(seed)))
        }
        Command::Metrics { g1, g2, combo, probes } => {
            let read = |p: &Path| -> std::result::Result<MeasureFile, ConfigError> {
                let text = fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                MeasureFile::from_json(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))
            };
            let (a, b) = (read(g1)?, read(g2)?);
            if *probes == 0 {
                return Err(ConfigError("probes must be at least 1".into()));
            }
            Ok((Job::Metrics { g1: a, g2: b, combo: *combo, probes: *probes }, None, None))
        }
        Command::Polysys { kind, m, r, d, restarts } => {
            let sys = PolySystem::new(*kind, *m, *r, *d)?;
            if *restarts == 0 {
                return Err(ConfigError("restarts must be at least 1".into()));
            }
            let cfg = SearchConfig { restarts: *restarts, seed: cli.seed.unwrap_or(0), ..SearchConfig::default() };
            let seed = cfg.seed;
            Ok((Job::Polysys(sys, cfg), None, Some(seed)))
        }
        Command::Rates { config, resume } => {
            let (c, hash): (RatesConfig, _) = load_config(config)?;
            check_version(c.schema_version)?;
            let mut exp = c.experiment;
            if let Some(s) = cli.seed {
                exp.seed = s;
            }
            exp.validate()?;
            let seed = exp.seed;
            Ok((Job::Rates { exp, resume: *resume }, Some(hash), Some(seed)))
        }
        Command::RouteDemo { config, tokens } => {
            let (mut c, hash): (RouteDemoConfig, _) = load_config(config)?;
            check_version(c.schema_version)?;
            if let Some(s) = cli.seed {
                c.route.seed = s;
            }
            c.route.validate()?;
            if !c.expert_scale.is_finite() {
                return Err(ConfigError("expert_scale must be finite".into()));
            }
            let (batch, labels) = match tokens {
                Some(p) => read_tokens(p)?,
                None => {
                    let t = c.tokens;
                    routing::clustered_tokens(t.batch, t.seq, t.dim, t.clusters, t.spread, t.noise, c.route.seed)?
                }
            };
            let seed = c.route.seed;
            Ok((Job::RouteDemo { cfg: c, tokens: batch, labels }, Some(hash), Some(seed)))
        }
    }
}

/// Reads tokens as one batch row; the optional `cluster` column labels them.
fn read_tokens(path: &Path) -> Result<(TokenBatch, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let cluster_col = header.iter().position(|h| h == "cluster");
    let dim = header.len() - usize::from(cluster_col.is_some());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for (k, field) in rec.iter().enumerate() {
            let bad = || HmoeError::InvalidInput(format!("{} row {}: cannot parse {field:?}", path.display(), i + 2));
            if Some(k) == cluster_col {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                data.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
        if cluster_col.is_none() {
            labels.push(0);
        }
    }
    let seq = labels.len();
    Ok((TokenBatch::new(1, seq, dim, data)?, labels))
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, contents)?;
        self.files.push(p);
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn execute(job: Job, out: &mut Outputs, verbose: bool) -> Result<i32> {
    match job {
        Job::Simulate(c) => {
            let truth = c.truth.expect("filled in by prepare");
            let data = sample(&truth, c.combo, c.n, c.input_law, c.seed)?;
            let p = out.dir.join("data.csv");
            data.write_csv(&p)?;
            out.files.push(p);
            out.write("data.json", &to_json(&data.sidecar())?)?;
        }
        Job::Fit(data, c) => {
            let fit = fit_mle(&data, c.combo, &c.fit)?;
            if verbose {
                eprintln!("fit: loglik {:.6} after {} iterations (restart {})", fit.final_loglik, fit.iters, fit.restart_index);
            }
            out.write("fit.json", &to_json(&fit)?)?;
            out.write("estimate.json", &(fit.estimate.to_json()? + "\n"))?;
            out.write("trace.csv", &fit.trace_csv())?;
        }
        Job::Metrics { g1, g2, combo, probes } => {
            let law = InputLaw::default();
            let pts = law.probes(g1.measure.dim, probes);
            let quad = QuadSpec::default();
            let h = metrics::hellinger(&g1.measure, &g2.measure, combo, &pts, &quad)?;
            let tv = metrics::total_variation(&g1.measure, &g2.measure, combo, &pts, &quad)?;
            let cells = metrics::voronoi_cells(&g1.measure, &g2.measure)?;
            let loss = metrics::loss_for_combo(&g1.measure, &g2.measure, combo, &cells, &ComboLossOptions::default())?;
            let ee = metrics::expert_error(&g1.measure, &g2.measure, &cells, &pts)?;
            let report = serde_json::json!({
                "combo": combo,
                "probes": probes,
                "hellinger": h,
                "total_variation": tv,
                "voronoi_combo_loss": loss,
                "voronoi_cells": cells,
                "expert_error": ee,
            });
            out.write("metrics.json", &to_json(&report)?)?;
        }
        Job::Polysys(sys, cfg) => {
            let outcome = search_nontrivial(&sys, &cfg)?;
            let report = PolyReport::new(&sys, &cfg, &outcome);
            if verbose {
                eprintln!("polysys: found={} best residual {:.3e}", report.found, report.best_residual);
            }
            out.write("polysys.json", &to_json(&report)?)?;
        }
        Job::Rates { exp, resume } => {
            let ckpt_path = out.dir.join("rates_checkpoint.jsonl");
            let (ckpt, done) = Checkpoint::open(&ckpt_path, &exp, resume)?;
            if verbose {
                eprintln!("rates: {} cells already done", done.len());
            }
            let report = ratelab::run_rate_experiment_with(&exp, &ratelab::FitEvaluator, Some((&ckpt, done)))?;
            out.files.push(ckpt_path);
            out.files.extend(report.write_outputs(&out.dir, "rates")?);
            if verbose {
                eprintln!("rates: slope {:.4} +- {:.4}, verdict {:?}", report.slope, report.slope_stderr, report.verdict);
            }
            if report.verdict == Verdict::ExperimentDegraded {
                return Ok(EXIT_DEGRADED);
            }
        }
        Job::RouteDemo { cfg, tokens, labels } => {
            let params = RouteParams::random(&cfg.route, tokens.dim);
            let s = cfg.expert_scale;
            let (y, trace) = routing::hmoe_forward(&tokens, &cfg.route, &params, |_, _, x, o| {
                for (a, b) in o.iter_mut().zip(x) {
                    *a = s * b;
                }
            })?;
            let clusters = labels.iter().max().map_or(1, |m| m + 1);
            let rows = routing::routing_histogram(&trace, &labels, clusters);
            let mut csv = String::from("level,cluster,expert,count\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{},{}\n", r.level, r.cluster, r.expert, r.count));
            }
            out.write("routing_histogram.csv", &csv)?;
            let max_err = y.data.iter().zip(&tokens.data).map(|(a, b)| (a - s * b).abs()).fold(0.0, f64::max);
            let summary = serde_json::json!({
                "tokens": tokens.batch * tokens.seq,
                "outer_routes": trace.outer.routes.len(),
                "outer_dropped": trace.outer.dropped.len(),
                "inner_routes": trace.inner.iter().map(|p| p.routes.len()).sum::<usize>(),
                "inner_dropped": trace.inner.iter().map(|p| p.dropped.len()).sum::<usize>(),
                "outer_loss": trace.outer_loss,
                "inner_loss": trace.inner_loss,
                "total_loss": trace.total_loss,
                "max_abs_deviation_from_scaled_input": max_err,
            });
            out.write("route_summary.json", &to_json(&summary)?)?;
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    run_cli(&cli, args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect())
}

fn run_cli(cli: &Cli, args: Vec<String>) -> i32 {
    let start = Instant::now();
    if let Some(t) = cli.threads {
        // Fails only if the pool was already built, e.g. by an earlier run in the same process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    let (job, config_hash, seed) = match prepare(cli) {
        Ok(j) => j,
        Err(ConfigError(msg)) => {
            eprintln!("config error: {msg}");
            return EXIT_CONFIG;
        }
    };
    if let Err(e) = fs::create_dir_all(&cli.out) {
        eprintln!("cannot create {}: {e}", cli.out.display());
        return EXIT_FAILURE;
    }
    let mut out = Outputs { dir: cli.out.clone(), files: Vec::new() };
    let code = match execute(job, &mut out, cli.verbose > 0) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    };
    let outputs = out
        .files
        .iter()
        .filter_map(|p| {
            let bytes = fs::read(p).ok()?;
            let name = p.strip_prefix(&out.dir).unwrap_or(p).to_string_lossy().into_owned();
            Some(OutputEntry { path: name, sha256: hex(&Sha256::digest(&bytes)) })
        })
        .collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: cli.command.name().into(),
        args,
        config_hash,
        seed,
        versions: Versions { hmoe: env!("CARGO_PKG_VERSION").into(), schema: SCHEMA_VERSION },
        exit_code: code,
        wall_time_secs: start.elapsed().as_secs_f64(),
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        outputs,
    };
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(HmoeError::from)
        .and_then(|s| fs::write(cli.out.join("manifest.json"), s + "\n").map_err(HmoeError::from));
    if let Err(e) = written {
        eprintln!("cannot write manifest: {e}");
        return EXIT_FAILURE;
    }
    code
}
