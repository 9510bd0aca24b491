//! Maximum-likelihood estimation by generalized EM.
//!
//! Each iteration runs an E-step (posterior path probabilities), a closed-form
//! weighted least-squares update of every expert, and a budget of projected
//! gradient-ascent steps with backtracking on the gating parameters. Every
//! sub-step is accepted only if it does not decrease its part of the
//! expected complete-data log-likelihood, which keeps the observed
//! log-likelihood trace monotone.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, HmoeError, Result};
use crate::linalg::solve_spd;
use crate::model::{
    dot, log_normal_pdf, log_sum_exp, ExpertAtom, GateKind, GatingCombo, GroupAtom, MeasureFile,
    MixingMeasure, LN_SQRT_2PI, LOG_DENSITY_FLOOR,
};
use crate::rng;

/// Paths whose total responsibility falls below this are frozen for the iteration.
pub const EMPTY_CELL: f64 = 1e-12;

/// How each restart is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Random,
    /// Start from the dataset's generating truth, with Gaussian noise of the
    /// given scale on every free parameter. Extra experts (when `k2` exceeds
    /// the truth) are created by splitting true experts.
    PerturbedTruth { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Filled in from the experiment when the config is embedded in one.
    #[serde(default)]
    pub k1: usize,
    #[serde(default)]
    pub k2: usize,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    /// Stop once the log-likelihood gain falls below `tol * max(1, |loglik|)`.
    #[serde(default = "defaults::tol")]
    pub tol: f64,
    #[serde(default = "defaults::restarts")]
    pub restarts: usize,
    #[serde(default = "defaults::init")]
    pub init: Init,
    /// Gradient steps on the gating parameters per M-step.
    #[serde(default = "defaults::gate_step")]
    pub gate_step: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::nu_min")]
    pub nu_min: f64,
    /// Every coordinate is clamped to `[-param_bound, param_bound]`.
    #[serde(default = "defaults::param_bound")]
    pub param_bound: f64,
    /// Squared-extrapolation acceleration of the EM iterates.
    #[serde(default = "defaults::accelerate")]
    pub accelerate: bool,
}

mod defaults {
    use super::Init;
    pub fn max_iters() -> usize {
        500
    }
    pub fn tol() -> f64 {
        1e-9
    }
    pub fn restarts() -> usize {
        8
    }
    pub fn init() -> Init {
        Init::Random
    }
    pub fn gate_step() -> usize {
        5
    }
    pub fn nu_min() -> f64 {
        1e-4
    }
    pub fn param_bound() -> f64 {
        50.0
    }
    pub fn accelerate() -> bool {
        true
    }
}

impl FitConfig {
    pub fn new(k1: usize, k2: usize) -> Self {
        FitConfig {
            k1,
            k2,
            max_iters: defaults::max_iters(),
            tol: defaults::tol(),
            restarts: defaults::restarts(),
            init: defaults::init(),
            gate_step: defaults::gate_step(),
            seed: 0,
            nu_min: defaults::nu_min(),
            param_bound: defaults::param_bound(),
            accelerate: defaults::accelerate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 < 1 || self.k2 < 1 {
            return Err(invalid("k1 and k2 must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol must be positive"));
        }
        if self.max_iters < 1 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if self.restarts < 1 {
            return Err(invalid("restarts must be at least 1"));
        }
        if self.gate_step < 1 {
            return Err(invalid("gate_step must be at least 1"));
        }
        if !(self.nu_min > 0.0) || !(self.param_bound > 0.0) {
            return Err(invalid("nu_min and param_bound must be positive"));
        }
        if let Init::PerturbedTruth { scale } = self.init {
            if !(scale >= 0.0) || !scale.is_finite() {
                return Err(invalid("perturbation scale must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Normalized estimate, in the on-disk measure schema.
    pub estimate: MeasureFile,
    pub final_loglik: f64,
    pub iters: usize,
    pub restart_index: usize,
    pub converged: bool,
    /// Log-likelihood at the start of every iteration, plus the final value.
    pub trace: Vec<f64>,
    /// Final log-likelihood of every restart (`None` for diverged restarts).
    pub restart_logliks: Vec<Option<f64>>,
}

impl FitResult {
    pub fn measure(&self) -> &MixingMeasure {
        &self.estimate.measure
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iter,loglik\n");
        for (i, v) in self.trace.iter().enumerate() {
            s.push_str(&format!("{i},{v:?}\n"));
        }
        s
    }
}

/// Posterior probabilities of every `(i1, i2)` path for every row.
#[derive(Clone, Debug)]
pub struct Responsibilities {
    pub paths: Vec<(usize, usize)>,
    pub n: usize,
    /// Row-major `n x paths.len()`.
    pub weights: Vec<f64>,
    /// Mean floored log-density of the data under the measure used.
    pub loglik: f64,
}

impl Responsibilities {
    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.paths.len();
        &self.weights[i * p..(i + 1) * p]
    }

    pub fn path_totals(&self) -> Vec<f64> {
        let p = self.paths.len();
        let mut t = vec![0.0; p];
        for row in self.weights.chunks_exact(p) {
            t.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        t
    }
}

/// E-step.
pub fn responsibilities(g: &MixingMeasure, combo: GatingCombo, data: &Dataset) -> Result<Responsibilities> {
    g.validate()?;
    if data.dim() != g.dim {
        return Err(invalid("dataset dimension does not match model"));
    }
    let paths = g.paths();
    let p = paths.len();
    let n = data.len();
    let mut weights = vec![0.0; n * p];
    let mut ll = 0.0;
    let mut l1 = vec![0.0; g.k1()];
    let mut l2 = Vec::with_capacity(g.k2_max());
    let first = combo.first_level();
    let second = combo.second_level();
    // Per path: log normalizer and 1 / (2 nu) of the expert Gaussian.
    let consts: Vec<(f64, f64)> = g
        .groups
        .iter()
        .flat_map(|grp| grp.experts.iter())
        .map(|e| (-LN_SQRT_2PI - 0.5 * e.nu.ln(), 0.5 / e.nu))
        .collect();
    for i in 0..n {
        let x = data.row(i);
        let y = data.y[i];
        for (l, grp) in l1.iter_mut().zip(&g.groups) {
            *l = first.logit(&grp.a, grp.b, x);
        }
        let lse1 = log_sum_exp(&l1);
        let row = &mut weights[i * p..(i + 1) * p];
        let mut k = 0;
        for (grp, lg1) in g.groups.iter().zip(&l1) {
            l2.clear();
            l2.extend(grp.experts.iter().map(|e| second.logit(&e.omega, e.beta, x)));
            let lse2 = log_sum_exp(&l2);
            for (e, lg2) in grp.experts.iter().zip(&l2) {
                let r = y - e.mean(x);
                let (c, h) = consts[k];
                row[k] = (lg1 - lse1) + (lg2 - lse2) + c - h * r * r;
                k += 1;
            }
        }
        let lse = log_sum_exp(row);
        if lse.is_finite() {
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        } else {
            // Every path underflows: fall back to the gate prior.
            let mut k = 0;
            for (grp, lg1) in g.groups.iter().zip(&l1) {
                l2.clear();
                l2.extend(grp.experts.iter().map(|e| second.logit(&e.omega, e.beta, x)));
                let lse2 = log_sum_exp(&l2);
                for lg2 in &l2 {
                    row[k] = ((lg1 - lse1) + (lg2 - lse2)).exp();
                    k += 1;
                }
            }
        }
        ll += lse.max(LOG_DENSITY_FLOOR);
    }
    Ok(Responsibilities { paths, n, weights, loglik: ll / n as f64 })
}

/// Closed-form expert update for one path.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertUpdate {
    pub eta: Vec<f64>,
    pub tau: f64,
    pub nu: f64,
}

/// Responsibility-weighted least squares for every path. `None` marks a
/// frozen path (total responsibility below [`EMPTY_CELL`]).
pub fn m_step_experts(resp: &Responsibilities, data: &Dataset, nu_min: f64) -> Vec<Option<ExpertUpdate>> {
    let d = data.dim();
    let p = resp.paths.len();
    (0..p)
        .map(|k| {
            let mut a = DMatrix::<f64>::zeros(d + 1, d + 1);
            let mut b = DVector::<f64>::zeros(d + 1);
            let mut total = 0.0;
            let mut z = vec![0.0; d + 1];
            for i in 0..resp.n {
                let w = resp.weights[i * p + k];
                if w == 0.0 {
                    continue;
                }
                total += w;
                z[..d].copy_from_slice(data.row(i));
                z[d] = 1.0;
                let y = data.y[i];
                for r in 0..=d {
                    let wz = w * z[r];
                    b[r] += wz * y;
                    for c in 0..=r {
                        a[(r, c)] += wz * z[c];
                    }
                }
            }
            if total < EMPTY_CELL {
                return None;
            }
            for r in 0..=d {
                for c in 0..r {
                    a[(c, r)] = a[(r, c)];
                }
            }
            let theta = solve_spd(&a, &b)?;
            let eta: Vec<f64> = theta.iter().take(d).cloned().collect();
            let tau = theta[d];
            let mut sse = 0.0;
            for i in 0..resp.n {
                let w = resp.weights[i * p + k];
                if w == 0.0 {
                    continue;
                }
                let r = data.y[i] - dot(&eta, data.row(i)) - tau;
                sse += w * r * r;
            }
            Some(ExpertUpdate { eta, tau, nu: (sse / total).max(nu_min) })
        })
        .collect()
}

/// Expected complete-data log-likelihood of one path's Gaussian, summed over rows.
fn expert_objective(resp: &Responsibilities, data: &Dataset, k: usize, eta: &[f64], tau: f64, nu: f64) -> f64 {
    let p = resp.paths.len();
    (0..resp.n)
        .map(|i| {
            let w = resp.weights[i * p + k];
            if w == 0.0 {
                0.0
            } else {
                w * log_normal_pdf(data.y[i], dot(eta, data.row(i)) + tau, nu)
            }
        })
        .sum()
}

/// Position of each gating parameter in the packed gate vector:
/// for every group `(a, b)`, then for every path `(omega, beta)`.
fn gate_len(g: &MixingMeasure) -> usize {
    (g.dim + 1) * (g.k1() + g.num_paths())
}

pub fn pack_gates(g: &MixingMeasure) -> Vec<f64> {
    let mut v = Vec::with_capacity(gate_len(g));
    for grp in &g.groups {
        v.extend_from_slice(&grp.a);
        v.push(grp.b);
    }
    for grp in &g.groups {
        for e in &grp.experts {
            v.extend_from_slice(&e.omega);
            v.push(e.beta);
        }
    }
    v
}

pub fn unpack_gates(g: &mut MixingMeasure, v: &[f64]) {
    let d = g.dim;
    let mut it = v.chunks_exact(d + 1);
    for grp in &mut g.groups {
        let c = it.next().expect("gate vector too short");
        grp.a.copy_from_slice(&c[..d]);
        grp.b = c[d];
    }
    for grp in &mut g.groups {
        for e in &mut grp.experts {
            let c = it.next().expect("gate vector too short");
            e.omega.copy_from_slice(&c[..d]);
            e.beta = c[d];
        }
    }
}

/// The gating part of the EM surrogate, averaged over rows:
/// `(1/n) sum_i [sum_i1 R_i,i1 log g1_i1(x_i) + sum_path r_i,path log g2_path(x_i)]`.
struct GateProblem<'a> {
    template: &'a MixingMeasure,
    combo: GatingCombo,
    resp: &'a Responsibilities,
    data: &'a Dataset,
    group_sizes: Vec<usize>,
}

impl<'a> GateProblem<'a> {
    fn new(template: &'a MixingMeasure, combo: GatingCombo, resp: &'a Responsibilities, data: &'a Dataset) -> Self {
        let group_sizes = template.groups.iter().map(|g| g.experts.len()).collect();
        GateProblem { template, combo, resp, data, group_sizes }
    }

    /// Objective and (optionally) gradient at the packed gate vector `v`.
    fn eval(&self, v: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.template.dim;
        let k1 = self.group_sizes.len();
        let first = self.combo.first_level();
        let second = self.combo.second_level();
        let p = self.resp.paths.len();
        let path_off = k1 * (d + 1);
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        // Log-probabilities, then probabilities, of each level.
        let mut lp1 = vec![0.0; k1];
        let mut lp2 = vec![0.0; p];
        let mut big_r = vec![0.0; k1];
        let mut locg = vec![0.0; d];
        let mut total = 0.0;
        for i in 0..self.resp.n {
            let x = self.data.row(i);
            let r = self.resp.row(i);
            for (j, l) in lp1.iter_mut().enumerate() {
                let c = &v[j * (d + 1)..(j + 1) * (d + 1)];
                *l = first.logit(&c[..d], c[d], x);
            }
            for (k, l) in lp2.iter_mut().enumerate() {
                let c = &v[path_off + k * (d + 1)..path_off + (k + 1) * (d + 1)];
                *l = second.logit(&c[..d], c[d], x);
            }
            log_normalize(&mut lp1);
            let mut k = 0;
            for (j, &m) in self.group_sizes.iter().enumerate() {
                log_normalize(&mut lp2[k..k + m]);
                big_r[j] = r[k..k + m].iter().sum();
                for kk in k..k + m {
                    if r[kk] > 0.0 {
                        total += r[kk] * lp2[kk];
                    }
                }
                k += m;
            }
            for j in 0..k1 {
                if big_r[j] > 0.0 {
                    total += big_r[j] * lp1[j];
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for j in 0..k1 {
                    let coef = big_r[j] - lp1[j].exp();
                    if coef == 0.0 {
                        continue;
                    }
                    let off = j * (d + 1);
                    first.logit_loc_grad(&v[off..off + d], x, &mut locg);
                    for t in 0..d {
                        g[off + t] += coef * locg[t];
                    }
                    g[off + d] += coef;
                }
                let mut k = 0;
                for (j, &m) in self.group_sizes.iter().enumerate() {
                    for kk in k..k + m {
                        let coef = r[kk] - big_r[j] * lp2[kk].exp();
                        if coef == 0.0 {
                            continue;
                        }
                        let off = path_off + kk * (d + 1);
                        second.logit_loc_grad(&v[off..off + d], x, &mut locg);
                        for t in 0..d {
                            g[off + t] += coef * locg[t];
                        }
                        g[off + d] += coef;
                    }
                    k += m;
                }
            }
        }
        let n = self.resp.n as f64;
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x /= n);
        }
        total / n
    }
}

/// In-place `v - log_sum_exp(v)`.
fn log_normalize(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Gating part of the EM surrogate at `g`.
pub fn gate_objective(g: &MixingMeasure, combo: GatingCombo, resp: &Responsibilities, data: &Dataset) -> f64 {
    GateProblem::new(g, combo, resp, data).eval(&pack_gates(g), None)
}

/// Analytic gradient of [`gate_objective`] in packed order (see [`pack_gates`]).
pub fn gate_gradient(g: &MixingMeasure, combo: GatingCombo, resp: &Responsibilities, data: &Dataset) -> Vec<f64> {
    let v = pack_gates(g);
    let mut grad = vec![0.0; v.len()];
    GateProblem::new(g, combo, resp, data).eval(&v, Some(&mut grad));
    grad
}

/// Outcome of a gate M-step.
#[derive(Clone, Debug)]
pub struct GateStep {
    pub measure: MixingMeasure,
    pub objective_before: f64,
    pub objective_after: f64,
    pub steps_taken: usize,
}

/// `budget` projected gradient-ascent steps with Armijo backtracking on the
/// gating parameters, followed by normalization. The objective never
/// decreases: a step that cannot be accepted ends the M-step.
pub fn m_step_gates(
    g: &MixingMeasure,
    resp: &Responsibilities,
    data: &Dataset,
    combo: GatingCombo,
    budget: usize,
    bound: f64,
) -> Result<GateStep> {
    if budget < 1 {
        return Err(invalid("gate step budget must be at least 1"));
    }
    let problem = GateProblem::new(g, combo, resp, data);
    let mut theta = pack_gates(g);
    let mut grad = vec![0.0; theta.len()];
    let mut f = problem.eval(&theta, Some(&mut grad));
    let f0 = f;
    let mut step = 1.0;
    let mut taken = 0;
    let mut cand = vec![0.0; theta.len()];
    let mut cand_grad = vec![0.0; theta.len()];
    for _ in 0..budget {
        let gnorm2: f64 = grad.iter().map(|v| v * v).sum();
        if !(gnorm2 > 1e-24) {
            break;
        }
        let mut t = step;
        let mut accepted = None;
        for _ in 0..30 {
            for ((c, th), gr) in cand.iter_mut().zip(&theta).zip(&grad) {
                *c = (th + t * gr).clamp(-bound, bound);
            }
            let ascent: f64 = cand.iter().zip(&theta).zip(&grad).map(|((c, th), gr)| (c - th) * gr).sum();
            let fc = problem.eval(&cand, Some(&mut cand_grad));
            if fc.is_finite() && fc >= f + 1e-4 * ascent && fc >= f {
                accepted = Some(fc);
                break;
            }
            t *= 0.25;
        }
        let Some(fc) = accepted else { break };
        // Barzilai-Borwein guess for the next trial step (ascent form).
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..theta.len() {
            let s = cand[k] - theta[k];
            ss += s * s;
            sy += s * (cand_grad[k] - grad[k]);
        }
        step = if sy < 0.0 { (ss / -sy).clamp(1e-4, 1e4) } else { (2.0 * t).min(1e4) };
        std::mem::swap(&mut theta, &mut cand);
        std::mem::swap(&mut grad, &mut cand_grad);
        f = fc;
        taken += 1;
    }
    let mut out = g.clone();
    unpack_gates(&mut out, &theta);
    let out = out.normalized(combo);
    Ok(GateStep { measure: out, objective_before: f0, objective_after: f, steps_taken: taken })
}

fn clamp_measure(g: &mut MixingMeasure, bound: f64, nu_min: f64) {
    for grp in &mut g.groups {
        grp.a.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
        grp.b = grp.b.clamp(-bound, bound);
        for e in &mut grp.experts {
            e.omega.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
            e.eta.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
            e.beta = e.beta.clamp(-bound, bound);
            e.tau = e.tau.clamp(-bound, bound);
            e.nu = e.nu.clamp(nu_min, bound);
        }
    }
}

/// Builds the starting measure for one restart.
pub fn initial_measure(
    data: &Dataset,
    combo: GatingCombo,
    cfg: &FitConfig,
    rng: &mut rng::Rng,
) -> Result<MixingMeasure> {
    let d = data.dim();
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let g = match cfg.init {
        Init::PerturbedTruth { scale } => {
            let truth = data
                .truth
                .as_ref()
                .ok_or_else(|| invalid("perturbed_truth initialization needs a dataset with a truth"))?;
            let base = expand_truth(&truth.measure.normalized(combo), cfg.k1, cfg.k2)?;
            let mut g = base;
            let first_free_loc = combo.first_level() == GateKind::Laplace;
            let second_free_loc = combo.second_level() == GateKind::Laplace;
            let k1 = g.k1();
            for (i1, grp) in g.groups.iter_mut().enumerate() {
                let last_group = i1 + 1 == k1;
                if !last_group || first_free_loc {
                    grp.a.iter_mut().for_each(|v| *v += scale * normal());
                }
                if !last_group {
                    grp.b += scale * normal();
                }
                let m = grp.experts.len();
                for (i2, e) in grp.experts.iter_mut().enumerate() {
                    let last = i2 + 1 == m;
                    if !last || second_free_loc {
                        e.omega.iter_mut().for_each(|v| *v += scale * normal());
                    }
                    if !last {
                        e.beta += scale * normal();
                    }
                    e.eta.iter_mut().for_each(|v| *v += scale * normal());
                    e.tau += scale * normal();
                    e.nu *= (scale * normal()).exp();
                }
            }
            g
        }
        Init::Random => {
            let (eta0, tau0, s2) = ols(data);
            let sd_y = {
                let m = data.y.iter().sum::<f64>() / data.len() as f64;
                (data.y.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / data.len() as f64).sqrt()
            };
            let h = data.input_law.map(|l| l.half_width()).unwrap_or(1.0);
            let unif = |rng: &mut rng::Rng| -> f64 { h * (2.0 * rng.random::<f64>() - 1.0) };
            let mut groups = Vec::with_capacity(cfg.k1);
            for _ in 0..cfg.k1 {
                let a: Vec<f64> = match combo.first_level() {
                    GateKind::Softmax => (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect(),
                    GateKind::Laplace => (0..d).map(|_| unif(rng)).collect(),
                };
                let mut experts = Vec::with_capacity(cfg.k2);
                for _ in 0..cfg.k2 {
                    let omega: Vec<f64> = match combo.second_level() {
                        GateKind::Softmax => (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect(),
                        GateKind::Laplace => (0..d).map(|_| unif(rng)).collect(),
                    };
                    let eta = eta0
                        .iter()
                        .map(|e| {
                            let z: f64 = StandardNormal.sample(&mut *rng);
                            e + z * sd_y / h
                        })
                        .collect();
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    experts.push(ExpertAtom {
                        omega,
                        beta: 0.0,
                        eta,
                        tau: tau0 + z * s2.sqrt(),
                        nu: s2.max(cfg.nu_min),
                    });
                }
                groups.push(GroupAtom { a, b: 0.0, experts });
            }
            MixingMeasure { dim: d, groups }
        }
    };
    let mut g = g.normalized(combo);
    clamp_measure(&mut g, cfg.param_bound, cfg.nu_min);
    g.validate()?;
    Ok(g)
}

/// Extends a truth to `k2` experts per group by splitting experts (never the
/// last one of a group while another is available, so the pinned atom keeps
/// its meaning). Each split halves the gate weight of the original.
fn expand_truth(truth: &MixingMeasure, k1: usize, k2: usize) -> Result<MixingMeasure> {
    if truth.k1() != k1 {
        return Err(invalid(format!("truth has k1 = {}, fit asks for {k1}", truth.k1())));
    }
    let mut out = truth.clone();
    for grp in &mut out.groups {
        let m = grp.experts.len();
        if m > k2 {
            return Err(invalid(format!("truth group has {m} experts, more than k2 = {k2}")));
        }
        let splittable = if m > 1 { m - 1 } else { 1 };
        let mut extra = 0;
        while grp.experts.len() < k2 {
            let src = extra % splittable;
            let ln2 = std::f64::consts::LN_2;
            grp.experts[src].beta -= ln2;
            let copy = grp.experts[src].clone();
            grp.experts.insert(src + 1, copy);
            extra += 1;
        }
    }
    Ok(out)
}

fn ols(data: &Dataset) -> (Vec<f64>, f64, f64) {
    let d = data.dim();
    let mut a = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut b = DVector::<f64>::zeros(d + 1);
    for i in 0..data.len() {
        let x = data.row(i);
        for r in 0..=d {
            let zr = if r < d { x[r] } else { 1.0 };
            b[r] += zr * data.y[i];
            for c in 0..=d {
                let zc = if c < d { x[c] } else { 1.0 };
                a[(r, c)] += zr * zc;
            }
        }
    }
    let theta = solve_spd(&a, &b).unwrap_or_else(|| DVector::zeros(d + 1));
    let eta: Vec<f64> = theta.iter().take(d).cloned().collect();
    let tau = theta[d];
    let sse: f64 = (0..data.len())
        .map(|i| {
            let r = data.y[i] - dot(&eta, data.row(i)) - tau;
            r * r
        })
        .sum();
    (eta, tau, (sse / data.len() as f64).max(1e-8))
}

/// One restart of generalized EM from `start`.
/// One generalized EM update: closed-form expert M-step (kept per path only
/// when it does not lower that path's objective) followed by projected
/// gradient steps on the gates.
fn em_map(
    g: &MixingMeasure,
    resp: &Responsibilities,
    data: &Dataset,
    combo: GatingCombo,
    cfg: &FitConfig,
) -> Result<MixingMeasure> {
    let mut g = g.clone();
    let updates = m_step_experts(resp, data, cfg.nu_min);
    for (k, upd) in updates.into_iter().enumerate() {
        let Some(mut u) = upd else { continue };
        u.eta.iter_mut().for_each(|v| *v = v.clamp(-cfg.param_bound, cfg.param_bound));
        u.tau = u.tau.clamp(-cfg.param_bound, cfg.param_bound);
        u.nu = u.nu.clamp(cfg.nu_min, cfg.param_bound);
        let (i1, i2) = resp.paths[k];
        let e = &g.groups[i1].experts[i2];
        let before = expert_objective(resp, data, k, &e.eta, e.tau, e.nu);
        let after = expert_objective(resp, data, k, &u.eta, u.tau, u.nu);
        if after >= before {
            let e = &mut g.groups[i1].experts[i2];
            e.eta = u.eta;
            e.tau = u.tau;
            e.nu = u.nu;
        }
    }
    Ok(m_step_gates(&g, resp, data, combo, cfg.gate_step, cfg.param_bound)?.measure)
}

/// All free parameters, gates first (see [`pack_gates`]), then per path
/// `(eta, tau, ln nu)`.
fn pack_params(g: &MixingMeasure) -> Vec<f64> {
    let mut v = pack_gates(g);
    for grp in &g.groups {
        for e in &grp.experts {
            v.extend_from_slice(&e.eta);
            v.push(e.tau);
            v.push(e.nu.ln());
        }
    }
    v
}

fn unpack_params(g: &mut MixingMeasure, v: &[f64]) {
    let n = gate_len(g);
    unpack_gates(g, &v[..n]);
    let d = g.dim;
    let mut it = v[n..].chunks_exact(d + 2);
    for grp in &mut g.groups {
        for e in &mut grp.experts {
            let c = it.next().expect("parameter vector too short");
            e.eta.copy_from_slice(&c[..d]);
            e.tau = c[d];
            e.nu = c[d + 1].exp();
        }
    }
}

/// Squared-extrapolation candidate `t0 - 2 a r + a^2 v` built from three
/// successive EM iterates, or `None` when the iterates have stalled.
fn squarem_candidate(
    g0: &MixingMeasure,
    g1: &MixingMeasure,
    g2: &MixingMeasure,
    combo: GatingCombo,
    cfg: &FitConfig,
) -> Option<MixingMeasure> {
    let (t0, t1, t2) = (pack_params(g0), pack_params(g1), pack_params(g2));
    let mut rn = 0.0;
    let mut vn = 0.0;
    for k in 0..t0.len() {
        let r = t1[k] - t0[k];
        let v = t2[k] - 2.0 * t1[k] + t0[k];
        rn += r * r;
        vn += v * v;
    }
    if !(vn > 0.0) {
        return None;
    }
    let alpha = -(rn / vn).sqrt();
    if !alpha.is_finite() || alpha >= -1.0 {
        return None;
    }
    let alpha = alpha.max(-100.0);
    let cand: Vec<f64> = (0..t0.len())
        .map(|k| {
            let r = t1[k] - t0[k];
            let v = t2[k] - 2.0 * t1[k] + t0[k];
            t0[k] - 2.0 * alpha * r + alpha * alpha * v
        })
        .collect();
    if cand.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut g = g0.clone();
    unpack_params(&mut g, &cand);
    let mut g = g.normalized(combo);
    clamp_measure(&mut g, cfg.param_bound, cfg.nu_min);
    g.validate().ok()?;
    Some(g)
}

/// Runs generalized EM from `start`. Returns the final measure, the
/// log-likelihood trace, the number of EM updates and whether the
/// tolerance was met. With `cfg.accelerate`, updates are grouped in
/// squared-extrapolation cycles; an extrapolated point is kept only if it
/// does not lower the log-likelihood, so the trace stays non-decreasing.
pub fn run_em(
    data: &Dataset,
    combo: GatingCombo,
    cfg: &FitConfig,
    start: MixingMeasure,
) -> Result<(MixingMeasure, Vec<f64>, usize, bool)> {
    let non_finite = || HmoeError::FitFailed { restarts: 1, diagnostics: "log-likelihood became non-finite".into() };
    let mut g = start;
    let mut resp = responsibilities(&g, combo, data)?;
    if !resp.loglik.is_finite() {
        return Err(non_finite());
    }
    let mut trace = vec![resp.loglik];
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        let prev = resp.loglik;
        let g1 = em_map(&g, &resp, data, combo, cfg)?;
        let r1 = responsibilities(&g1, combo, data)?;
        iters += 1;
        let (mut g_next, mut r_next) = (g1, r1);
        if cfg.accelerate && iters < cfg.max_iters {
            let g2 = em_map(&g_next, &r_next, data, combo, cfg)?;
            let r2 = responsibilities(&g2, combo, data)?;
            iters += 1;
            let cand = squarem_candidate(&g, &g_next, &g2, combo, cfg);
            (g_next, r_next) = (g2, r2);
            if let Some(c) = cand {
                if iters < cfg.max_iters {
                    let rc = responsibilities(&c, combo, data)?;
                    if rc.loglik.is_finite() {
                        let g3 = em_map(&c, &rc, data, combo, cfg)?;
                        let r3 = responsibilities(&g3, combo, data)?;
                        iters += 1;
                        if r3.loglik.is_finite() && r3.loglik >= r_next.loglik {
                            (g_next, r_next) = (g3, r3);
                        }
                    }
                }
            }
        }
        if !r_next.loglik.is_finite() {
            return Err(non_finite());
        }
        g = g_next;
        resp = r_next;
        trace.push(resp.loglik);
        if resp.loglik - prev <= cfg.tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok((g, trace, iters, converged))
}

pub fn fit_mle(data: &Dataset, combo: GatingCombo, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let needed = cfg.k1 * ((data.dim() + 1) + cfg.k2 * (2 * data.dim() + 3));
    if data.len() < needed {
        return Err(invalid(format!("need at least {needed} rows for this model, got {}", data.len())));
    }
    let runs: Vec<Result<(MixingMeasure, Vec<f64>, usize, bool)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, r as u64);
            let start = initial_measure(data, combo, cfg, &mut rng)?;
            run_em(data, combo, cfg, start)
        })
        .collect();
    let mut best: Option<(usize, MixingMeasure, Vec<f64>, usize, bool)> = None;
    let mut restart_logliks = Vec::with_capacity(runs.len());
    let mut errors = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok((g, trace, iters, conv)) => {
                let ll = *trace.last().expect("trace non-empty");
                restart_logliks.push(Some(ll));
                let better = match &best {
                    None => true,
                    Some((_, _, bt, _, _)) => ll > *bt.last().expect("trace non-empty"),
                };
                if better {
                    best = Some((r, g, trace, iters, conv));
                }
            }
            Err(HmoeError::InvalidInput(m)) => return Err(HmoeError::InvalidInput(m)),
            Err(e) => {
                restart_logliks.push(None);
                errors.push(format!("restart {r}: {e}"));
            }
        }
    }
    let Some((restart_index, g, trace, iters, converged)) = best else {
        return Err(HmoeError::FitFailed { restarts: cfg.restarts, diagnostics: errors.join("; ") });
    };
    Ok(FitResult {
        estimate: MeasureFile { combo, measure: g.normalized(combo) },
        final_loglik: *trace.last().expect("trace non-empty"),
        iters,
        restart_index,
        converged,
        trace,
        restart_logliks,
    })
}
