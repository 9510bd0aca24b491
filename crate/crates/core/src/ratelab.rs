//! Convergence-rate experiments: sample, fit, measure, and regress the log
//! of the per-`n` median metric on `log n`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{fmt_f64, sample, InputLaw};
use crate::error::{invalid, HmoeError, Result};
use crate::estimation::{fit_mle, FitConfig, Init};
use crate::metrics::{self, ComboLossOptions};
use crate::model::{ExpertAtom, GateKind, GatingCombo, GroupAtom, MixingMeasure};
use crate::quadrature::QuadSpec;
use crate::rng;

/// Share of failed replicates above which an experiment is degraded.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMetric {
    /// The loss matched to the combination's parameter-rate theorem.
    VoronoiCombo,
    /// Probe average of the Hellinger distance to the truth.
    Hellinger,
    /// Largest `||eta_hat - eta*||` over over-specified cells (all cells
    /// when none is over-specified).
    ExpertError,
}

impl RateMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            RateMetric::VoronoiCombo => "voronoi_combo",
            RateMetric::Hellinger => "hellinger",
            RateMetric::ExpertError => "expert_error",
        }
    }
}

fn default_replicates() -> usize {
    20
}
fn default_n_grid() -> Vec<usize> {
    vec![1000, 3162, 10000, 31623, 100000]
}
fn default_input_law() -> InputLaw {
    InputLaw::UniformBox { half_width: 2.0 }
}
fn default_probes() -> usize {
    metrics::DEFAULT_PROBES
}
fn default_fit() -> FitConfig {
    FitConfig { init: Init::PerturbedTruth { scale: 0.1 }, restarts: 1, max_iters: 3000, tol: 1e-10, ..FitConfig::new(0, 0) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateExperiment {
    pub combo: GatingCombo,
    /// Ground truth; the built-in default for `combo` when absent.
    #[serde(default)]
    pub truth: Option<MixingMeasure>,
    /// Experts per group in the fitted model.
    pub fit_k2: usize,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    pub metric: RateMetric,
    /// Metrics recorded alongside `metric` with their own slopes.
    #[serde(default)]
    pub extra_metrics: Vec<RateMetric>,
    /// `k1` and `k2` are taken from the truth and `fit_k2`.
    #[serde(default = "default_fit")]
    pub fit_cfg: FitConfig,
    #[serde(default)]
    pub seed: u64,
    /// Uniform on `[-2, 2]` by default, so the Laplace gate kinks of the
    /// default truth sit well inside the input range.
    #[serde(default = "default_input_law")]
    pub input_law: InputLaw,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub loss: ComboLossOptions,
    /// Accepted slope interval for the verdict.
    #[serde(default)]
    pub slope_band: Option<(f64, f64)>,
}

impl RateExperiment {
    pub fn new(combo: GatingCombo, fit_k2: usize, metric: RateMetric) -> Self {
        RateExperiment {
            combo,
            truth: None,
            fit_k2,
            n_grid: default_n_grid(),
            replicates: default_replicates(),
            metric,
            extra_metrics: Vec::new(),
            fit_cfg: default_fit(),
            seed: 0,
            input_law: default_input_law(),
            probes: default_probes(),
            loss: ComboLossOptions::default(),
            slope_band: None,
        }
    }

    pub fn truth(&self) -> MixingMeasure {
        self.truth.clone().unwrap_or_else(|| default_truth(self.combo))
    }

    pub fn fit_config(&self) -> FitConfig {
        let t = self.truth();
        FitConfig { k1: t.k1(), k2: self.fit_k2, ..self.fit_cfg.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.len() < 4 {
            return Err(invalid("n_grid needs at least 4 sample sizes"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("n_grid must be strictly increasing"));
        }
        if self.replicates < 5 {
            return Err(invalid("replicates must be at least 5"));
        }
        if self.probes == 0 {
            return Err(invalid("probes must be at least 1"));
        }
        self.input_law.validate()?;
        let t = self.truth();
        t.check_truth(self.combo)?;
        if self.fit_k2 < t.k2_max() {
            return Err(invalid(format!("fit_k2 = {} is below the truth's {} experts per group", self.fit_k2, t.k2_max())));
        }
        if let Some((lo, hi)) = self.slope_band {
            if !(lo <= hi) {
                return Err(invalid("slope_band must be (low, high) with low <= high"));
            }
        }
        self.fit_config().validate()
    }

    /// All metrics the experiment records, primary first.
    pub fn all_metrics(&self) -> Vec<RateMetric> {
        let mut v = vec![self.metric];
        for m in &self.extra_metrics {
            if !v.contains(m) {
                v.push(*m);
            }
        }
        v
    }

    /// Size of the largest over-specified cell when the fit starts from the
    /// split truth (1 for an exact fit).
    pub fn overspec_cell_size(&self) -> usize {
        let t = self.truth();
        let min_k2 = t.groups.iter().map(|g| g.experts.len()).min().unwrap_or(1);
        (self.fit_k2 + 1).saturating_sub(min_k2).max(1)
    }

    /// Exponent of `n` predicted by the theory for `metric`, ignoring
    /// logarithmic factors.
    pub fn theoretical_exponent(&self, metric: RateMetric) -> f64 {
        let m = self.overspec_cell_size();
        match metric {
            RateMetric::VoronoiCombo | RateMetric::Hellinger => -0.5,
            RateMetric::ExpertError if m == 1 => -0.5,
            RateMetric::ExpertError => match self.combo {
                GatingCombo::LL => -0.25,
                _ => match metrics::solvability_order(m, &self.loss) {
                    Ok((r, _)) => -1.0 / r,
                    Err(_) => f64::NAN,
                },
            },
        }
    }

    /// Hash of the canonical JSON form, used to tie checkpoints to an
    /// experiment.
    pub fn fingerprint(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(hex(&Sha256::digest(text.as_bytes())))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Built-in ground truth for rate runs: `d = 1`, two groups of two experts,
/// gate atoms at least 1.5 apart, expert slopes at least 1.0 apart and
/// variance 0.25. Gate parameters are placed per gate kind (softmax atoms as
/// slopes relative to the pinned last atom, Laplace atoms as locations).
pub fn default_truth(combo: GatingCombo) -> MixingMeasure {
    let e = |omega: f64, eta: f64, tau: f64| ExpertAtom { omega: vec![omega], beta: 0.0, eta: vec![eta], tau, nu: 0.25 };
    let (a0, a1) = match combo.first_level() {
        GateKind::Softmax => (1.5, 0.0),
        GateKind::Laplace => (0.75, -0.75),
    };
    let (w00, w01, w10, w11) = match combo.second_level() {
        GateKind::Softmax => (2.0, 0.0, -2.0, 0.0),
        GateKind::Laplace => (0.75, -0.75, -0.75, 0.75),
    };
    MixingMeasure {
        dim: 1,
        groups: vec![
            GroupAtom { a: vec![a0], b: 0.0, experts: vec![e(w00, 2.0, 0.5), e(w01, -1.0, -0.5)] },
            GroupAtom { a: vec![a1], b: 0.0, experts: vec![e(w10, 1.0, -1.0), e(w11, -2.0, 1.0)] },
        ],
    }
}

/// Outcome of one `(n, replicate)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub n: usize,
    pub replicate: usize,
    /// Metric values keyed by metric name; empty for failed cells.
    pub values: BTreeMap<RateMetric, f64>,
    /// Mean log-likelihood of the fit and of the truth on the same data.
    pub loglik: Option<f64>,
    pub truth_loglik: Option<f64>,
    pub iters: usize,
    pub converged: bool,
    pub error: Option<String>,
}

impl CellRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn failed(n: usize, replicate: usize, err: &HmoeError) -> Self {
        CellRecord {
            n,
            replicate,
            values: BTreeMap::new(),
            loglik: None,
            truth_loglik: None,
            iters: 0,
            converged: false,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Ordinary least squares of `ln value` on `ln n`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(invalid("slope fit needs at least 3 points"));
    }
    if points.iter().any(|&(n, v)| !(n > 0.0) || !(v > 0.0) || !n.is_finite() || !v.is_finite()) {
        return Err(invalid("slope fit needs positive finite sample sizes and values"));
    }
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("slope fit needs at least two distinct sample sizes"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (sse / (k - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, intercept, stderr })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    WithinBand,
    OutsideBand,
    /// No slope band configured.
    Unchecked,
    ExperimentDegraded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: RateMetric,
    /// `(n, median)` over successful replicates.
    pub medians: Vec<(usize, f64)>,
    pub fit: Option<SlopeFit>,
    pub theoretical_exponent: f64,
}

/// Fitted-minus-truth mean log-likelihood over successful replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub median_gap: f64,
    pub min_gap: f64,
    pub per_n_median_gap: Vec<(usize, f64)>,
    pub unconverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub combo: GatingCombo,
    pub metric: RateMetric,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub theoretical_exponent: f64,
    pub slope_band: Option<(f64, f64)>,
    pub verdict: Verdict,
    pub used_replicates: usize,
    pub excluded_replicates: usize,
    pub summaries: Vec<MetricSummary>,
    pub fit_quality: Option<FitQuality>,
    pub cells: Vec<CellRecord>,
}

impl RateReport {
    pub fn summary(&self, metric: RateMetric) -> Option<&MetricSummary> {
        self.summaries.iter().find(|s| s.metric == metric)
    }

    /// Raw per-cell CSV: `n,replicate,<metrics...>,loglik,truth_loglik,iters,status`.
    pub fn raw_csv(&self) -> String {
        let metrics: Vec<RateMetric> = self.summaries.iter().map(|s| s.metric).collect();
        let mut out = String::from("n,replicate");
        for m in &metrics {
            out.push(',');
            out.push_str(m.as_str());
        }
        out.push_str(",loglik,truth_loglik,iters,status\n");
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!("{},{}", c.n, c.replicate));
            for m in &metrics {
                out.push(',');
                out.push_str(&opt(c.values.get(m).copied()));
            }
            let status = match (&c.error, c.converged) {
                (Some(_), _) => "failed",
                (None, true) => "ok",
                (None, false) => "max_iters",
            };
            out.push_str(&format!(",{},{},{},{status}\n", opt(c.loglik), opt(c.truth_loglik), c.iters));
        }
        out
    }

    /// Whitespace-separated `n median fitted_line` rows per metric, for
    /// log-log plots.
    pub fn gnuplot_data(&self) -> String {
        let mut out = String::new();
        for s in &self.summaries {
            out.push_str(&format!("# metric {}\n# n median fitted\n", s.metric.as_str()));
            for &(n, med) in &s.medians {
                let line = s.fit.map(|f| (f.intercept + f.slope * (n as f64).ln()).exp()).unwrap_or(f64::NAN);
                out.push_str(&format!("{n} {} {}\n", fmt_f64(med), fmt_f64(line)));
            }
            out.push_str("\n\n");
        }
        out
    }

    /// Writes `<stem>_raw.csv`, `<stem>_summary.json` and `<stem>.dat` into
    /// `dir` and returns their paths.
    pub fn write_outputs(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let raw = dir.join(format!("{stem}_raw.csv"));
        fs::write(&raw, self.raw_csv())?;
        let summary = dir.join(format!("{stem}_summary.json"));
        let mut slim = self.clone();
        slim.cells.clear();
        fs::write(&summary, serde_json::to_string_pretty(&slim)? + "\n")?;
        let dat = dir.join(format!("{stem}.dat"));
        fs::write(&dat, self.gnuplot_data())?;
        Ok(vec![raw, summary, dat])
    }
}

/// Produces the record of one cell. The default evaluator samples, fits and
/// measures; tests inject closed-form series instead.
pub trait CellEvaluator: Sync {
    fn evaluate(&self, exp: &RateExperiment, n: usize, replicate: usize) -> Result<CellRecord>;
}

/// Sample from the truth, fit by maximum likelihood, and compute every metric.
pub struct FitEvaluator;

impl CellEvaluator for FitEvaluator {
    fn evaluate(&self, exp: &RateExperiment, n: usize, replicate: usize) -> Result<CellRecord> {
        let truth = exp.truth();
        let data_seed = rng::derive_seed(exp.seed, &[n as u64, replicate as u64, 0]);
        let fit_seed = rng::derive_seed(exp.seed, &[n as u64, replicate as u64, 1]);
        let data = sample(&truth, exp.combo, n, exp.input_law, data_seed)?;
        let cfg = FitConfig { seed: fit_seed, ..exp.fit_config() };
        let fit = fit_mle(&data, exp.combo, &cfg)?;
        let g = fit.measure();
        let cells = metrics::voronoi_cells(g, &truth)?;
        let mut values = BTreeMap::new();
        for m in exp.all_metrics() {
            let v = match m {
                RateMetric::VoronoiCombo => metrics::loss_for_combo(g, &truth, exp.combo, &cells, &exp.loss)?.value,
                RateMetric::Hellinger => {
                    let probes = exp.input_law.probes(truth.dim, exp.probes);
                    metrics::hellinger(g, &truth, exp.combo, &probes, &QuadSpec::default())?
                }
                RateMetric::ExpertError => {
                    let e = metrics::expert_error(g, &truth, &cells, &[])?;
                    e.max_eta_dist_overspecified.unwrap_or(e.max_eta_dist)
                }
            };
            values.insert(m, v);
        }
        Ok(CellRecord {
            n,
            replicate,
            values,
            loglik: Some(fit.final_loglik),
            truth_loglik: Some(truth.log_likelihood(exp.combo, &data)?),
            iters: fit.iters,
            converged: fit.converged,
            error: None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    experiment: String,
}

/// Append-only JSON-lines file of finished cells. The first line names the
/// experiment fingerprint.
pub struct Checkpoint {
    path: PathBuf,
    file: Mutex<File>,
}

impl Checkpoint {
    /// Opens `path`, returning the cells already recorded there. With
    /// `resume` false any existing file is replaced.
    pub fn open(path: &Path, exp: &RateExperiment, resume: bool) -> Result<(Self, Vec<CellRecord>)> {
        let fp = exp.fingerprint()?;
        let mut done = Vec::new();
        if resume && path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut lines = reader.lines();
            if let Some(first) = lines.next() {
                let header: CheckpointHeader = serde_json::from_str(&first?)?;
                if header.experiment != fp {
                    return Err(HmoeError::Config(format!(
                        "checkpoint {} belongs to a different experiment",
                        path.display()
                    )));
                }
                for line in lines {
                    let line = line?;
                    // A torn final line from an interrupted write is dropped.
                    match serde_json::from_str::<CellRecord>(&line) {
                        Ok(c) => done.push(c),
                        Err(_) => break,
                    }
                }
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = File::create(path)?;
        writeln!(file, "{}", serde_json::to_string(&CheckpointHeader { experiment: fp })?)?;
        for c in &done {
            writeln!(file, "{}", serde_json::to_string(c)?)?;
        }
        file.flush()?;
        drop(file);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok((Checkpoint { path: path.to_path_buf(), file: Mutex::new(file) }, done))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&self, cell: &CellRecord) -> Result<()> {
        let line = serde_json::to_string(cell)? + "\n";
        let mut f = self.file.lock().expect("checkpoint lock poisoned");
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// Runs every `(n, replicate)` cell with the sampling-and-fitting evaluator.
pub fn run_rate_experiment(exp: &RateExperiment) -> Result<RateReport> {
    run_rate_experiment_with(exp, &FitEvaluator, None)
}

/// Runs the cells not yet in `checkpoint` with `eval`, then aggregates.
/// The report does not depend on execution order or on how the run was
/// split across resumptions.
pub fn run_rate_experiment_with(
    exp: &RateExperiment,
    eval: &dyn CellEvaluator,
    checkpoint: Option<(&Checkpoint, Vec<CellRecord>)>,
) -> Result<RateReport> {
    exp.validate()?;
    let (ckpt, done) = match checkpoint {
        Some((c, d)) => (Some(c), d),
        None => (None, Vec::new()),
    };
    let mut cells: BTreeMap<(usize, usize), CellRecord> = done
        .into_iter()
        .filter(|c| exp.n_grid.contains(&c.n) && c.replicate < exp.replicates)
        .map(|c| ((c.n, c.replicate), c))
        .collect();
    // Largest sample sizes first so the slowest cells start early.
    let todo: Vec<(usize, usize)> = exp
        .n_grid
        .iter()
        .rev()
        .flat_map(|&n| (0..exp.replicates).map(move |r| (n, r)))
        .filter(|k| !cells.contains_key(k))
        .collect();
    let fresh: Vec<Result<CellRecord>> = todo
        .par_iter()
        .map(|&(n, r)| {
            let rec = match eval.evaluate(exp, n, r) {
                Ok(c) => c,
                Err(e @ (HmoeError::Io(_) | HmoeError::Config(_))) => return Err(e),
                Err(e) => CellRecord::failed(n, r, &e),
            };
            if let Some(c) = ckpt {
                c.record(&rec)?;
            }
            Ok(rec)
        })
        .collect();
    for rec in fresh {
        let rec = rec?;
        cells.insert((rec.n, rec.replicate), rec);
    }
    aggregate(exp, cells.into_values().collect())
}

fn aggregate(exp: &RateExperiment, cells: Vec<CellRecord>) -> Result<RateReport> {
    let total = exp.n_grid.len() * exp.replicates;
    let used = cells.iter().filter(|c| c.ok()).count();
    let excluded = total - used;
    let degraded = excluded as f64 > MAX_FAILURE_FRACTION * total as f64;
    let mut summaries = Vec::new();
    for m in exp.all_metrics() {
        let medians: Vec<(usize, f64)> = exp
            .n_grid
            .iter()
            .filter_map(|&n| {
                let mut v: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.n == n)
                    .filter_map(|c| c.values.get(&m).copied())
                    .filter(|v| v.is_finite())
                    .collect();
                (!v.is_empty()).then(|| (n, median(&mut v)))
            })
            .collect();
        let pts: Vec<(f64, f64)> = medians.iter().map(|&(n, v)| (n as f64, v)).collect();
        let fit = fit_loglog_slope(&pts).ok();
        summaries.push(MetricSummary { metric: m, medians, fit, theoretical_exponent: exp.theoretical_exponent(m) });
    }
    let primary = summaries[0].fit;
    let (slope, intercept, slope_stderr) = primary.map(|f| (f.slope, f.intercept, f.stderr)).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let verdict = if degraded || primary.is_none() {
        Verdict::ExperimentDegraded
    } else {
        match exp.slope_band {
            None => Verdict::Unchecked,
            Some((lo, hi)) if slope >= lo && slope <= hi => Verdict::WithinBand,
            Some(_) => Verdict::OutsideBand,
        }
    };
    let fit_quality = fit_quality(&exp.n_grid, &cells);
    Ok(RateReport {
        combo: exp.combo,
        metric: exp.metric,
        n_grid: exp.n_grid.clone(),
        replicates: exp.replicates,
        seed: exp.seed,
        slope,
        intercept,
        slope_stderr,
        theoretical_exponent: exp.theoretical_exponent(exp.metric),
        slope_band: exp.slope_band,
        verdict,
        used_replicates: used,
        excluded_replicates: excluded,
        summaries,
        fit_quality,
        cells,
    })
}

fn fit_quality(n_grid: &[usize], cells: &[CellRecord]) -> Option<FitQuality> {
    let gap = |c: &CellRecord| Some(c.loglik? - c.truth_loglik?);
    let mut all: Vec<f64> = cells.iter().filter_map(gap).collect();
    if all.is_empty() {
        return None;
    }
    let min_gap = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let per_n_median_gap = n_grid
        .iter()
        .filter_map(|&n| {
            let mut v: Vec<f64> = cells.iter().filter(|c| c.n == n).filter_map(gap).collect();
            (!v.is_empty()).then(|| (n, median(&mut v)))
        })
        .collect();
    Some(FitQuality {
        median_gap: median(&mut all),
        min_gap,
        per_n_median_gap,
        unconverged: cells.iter().filter(|c| c.ok() && !c.converged).count(),
    })
}

/// Slope tolerance for the ordering comparisons.
const ORDER_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboSlope {
    pub combo: GatingCombo,
    pub slope: f64,
    pub stderr: f64,
    /// `(slope - stderr, slope + stderr)`.
    pub band: (f64, f64),
    pub median_loglik_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboComparison {
    pub slopes: Vec<ComboSlope>,
    pub required_margin: f64,
    /// `SS slope - LL slope`.
    pub observed_margin: f64,
    pub ll_le_sl: bool,
    pub ll_le_ss_minus_margin: bool,
    pub ordering_holds: bool,
    /// "ordered", "indistinguishable" or "reversed".
    pub verdict: String,
}

/// Compares the slopes of paired experiments that differ only in the gating
/// combination. `reports` must contain the LL and SS runs; SL is optional.
pub fn compare_combos(reports: &[RateReport], margin: f64) -> Result<ComboComparison> {
    let find = |c: GatingCombo| reports.iter().find(|r| r.combo == c);
    let (Some(ll), Some(ss)) = (find(GatingCombo::LL), find(GatingCombo::SS)) else {
        return Err(invalid("combo comparison needs LL and SS reports"));
    };
    if ll.n_grid != ss.n_grid || ll.metric != ss.metric {
        return Err(invalid("compared experiments must share the metric and n_grid"));
    }
    let sl = find(GatingCombo::SL);
    let slopes: Vec<ComboSlope> = [Some(ll), sl, Some(ss)]
        .into_iter()
        .flatten()
        .map(|r| ComboSlope {
            combo: r.combo,
            slope: r.slope,
            stderr: r.slope_stderr,
            band: (r.slope - r.slope_stderr, r.slope + r.slope_stderr),
            median_loglik_gap: r.fit_quality.as_ref().map(|q| q.median_gap),
        })
        .collect();
    let ll_le_sl = sl.is_none_or(|s| ll.slope <= s.slope + ORDER_EPS);
    let ll_le_ss_minus_margin = ll.slope <= ss.slope - margin + ORDER_EPS;
    let ordering_holds = ll_le_sl && ll_le_ss_minus_margin;
    let observed_margin = ss.slope - ll.slope;
    let joint_se = (ll.slope_stderr.powi(2) + ss.slope_stderr.powi(2)).sqrt();
    let verdict = if ordering_holds {
        "ordered"
    } else if observed_margin.abs() <= joint_se + ORDER_EPS {
        "indistinguishable"
    } else {
        "reversed"
    };
    Ok(ComboComparison {
        slopes,
        required_margin: margin,
        observed_margin,
        ll_le_sl,
        ll_le_ss_minus_margin,
        ordering_holds,
        verdict: verdict.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct PowerLaw {
        c: f64,
        log_factor: bool,
    }

    impl CellEvaluator for PowerLaw {
        fn evaluate(&self, exp: &RateExperiment, n: usize, replicate: usize) -> Result<CellRecord> {
            let nf = n as f64;
            let v = if self.log_factor { self.c * (nf.ln() / nf).sqrt() } else { self.c / nf.sqrt() };
            Ok(CellRecord {
                n,
                replicate,
                values: [(exp.metric, v)].into_iter().collect(),
                loglik: Some(0.0),
                truth_loglik: Some(0.0),
                iters: 1,
                converged: true,
                error: None,
            })
        }
    }

    fn injected() -> RateExperiment {
        RateExperiment { replicates: 5, ..RateExperiment::new(GatingCombo::LL, 2, RateMetric::VoronoiCombo) }
    }

    #[test]
    fn exact_power_law() {
        let r = run_rate_experiment_with(&injected(), &PowerLaw { c: 3.0, log_factor: false }, None).unwrap();
        assert!((r.slope + 0.5).abs() < 1e-12);
        assert!(r.slope_stderr < 1e-12);
        assert_eq!(r.used_replicates + r.excluded_replicates, 25);
    }

    #[test]
    fn log_factor_flattens_slope() {
        let mut exp = injected();
        exp.n_grid = vec![1000, 3162, 10000, 31623, 100000];
        let r = run_rate_experiment_with(&exp, &PowerLaw { c: 1.0, log_factor: true }, None).unwrap();
        assert!(r.slope > -0.5 && r.slope < -0.37, "{}", r.slope);
    }

    #[test]
    fn slope_fit_basics() {
        let f = fit_loglog_slope(&[(10.0, 0.1), (100.0, 0.01), (1000.0, 0.001)]).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && f.stderr < 1e-12);
        let f = fit_loglog_slope(&[(10.0, 2.0), (100.0, 2.0), (1000.0, 2.0)]).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(fit_loglog_slope(&[(10.0, 2.0), (100.0, 0.0), (1000.0, 2.0)]).is_err());
        assert!(fit_loglog_slope(&[(10.0, 2.0), (100.0, 1.0)]).is_err());
    }

    #[test]
    fn validation() {
        let mut e = injected();
        e.n_grid = vec![10, 20, 30];
        assert!(e.validate().is_err());
        let mut e = injected();
        e.n_grid = vec![10, 30, 20, 40];
        assert!(e.validate().is_err());
        let mut e = injected();
        e.replicates = 4;
        assert!(e.validate().is_err());
        let mut e = injected();
        e.fit_k2 = 1;
        assert!(e.validate().is_err());
    }

    #[test]
    fn default_truths_are_valid() {
        for c in GatingCombo::ALL {
            default_truth(c).check_truth(c).unwrap();
        }
    }

    #[test]
    fn theoretical_exponents() {
        let e = RateExperiment::new(GatingCombo::SS, 3, RateMetric::ExpertError);
        assert_eq!(e.overspec_cell_size(), 2);
        assert_eq!(e.theoretical_exponent(RateMetric::ExpertError), -0.25);
        let e = RateExperiment::new(GatingCombo::SS, 4, RateMetric::ExpertError);
        assert!((e.theoretical_exponent(RateMetric::ExpertError) + 1.0 / 6.0).abs() < 1e-15);
        let e = RateExperiment::new(GatingCombo::LL, 4, RateMetric::ExpertError);
        assert_eq!(e.theoretical_exponent(RateMetric::ExpertError), -0.25);
        let e = RateExperiment::new(GatingCombo::LL, 2, RateMetric::ExpertError);
        assert_eq!(e.theoretical_exponent(RateMetric::ExpertError), -0.5);
    }
}
