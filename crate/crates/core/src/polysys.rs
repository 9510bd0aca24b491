//! Polynomial equation systems that decide the convergence order of
//! over-specified Voronoi cells, and a numerical search for non-trivial
//! solutions.
//!
//! For a cell with `m` fitted atoms the unknowns are, per atom `i`, a weight
//! `p_i` and perturbation directions `q1_i, q3_i` (vectors), `q4_i, q5_i`
//! (scalars), plus a shared vector `q2`. Equation `(rho1, rho2)` reads
//!
//! ```text
//! sum_i sum_{alpha} p_i^2 q1_i^a1 q2^a2 q3_i^a3 q4_i^a4 q5_i^a5 / alpha! = 0
//! ```
//!
//! over `a1 + a2 + a3 = rho1`, `|a3| + a4 + 2 a5 = rho2`, for every
//! `1 <= |rho1| + rho2 <= r`. The Softmax-Laplace system drops `q1`, the
//! Laplace-Laplace system keeps only `q4, q5` and a scalar order `rho`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::damped_gauss_newton_step;
use crate::model::GatingCombo;
use crate::rng;

/// Threshold on the residual norm below which a candidate counts as a solution.
pub const SOLVED_TOL: f64 = 1e-10;
/// Lower bound on `|p_i|` built into the search parameterization.
pub const P_MIN: f64 = 0.1;
const P_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolySystem {
    pub kind: GatingCombo,
    pub m: usize,
    pub r: usize,
    pub d: usize,
}

impl PolySystem {
    pub fn new(kind: GatingCombo, m: usize, r: usize, d: usize) -> Result<Self> {
        if m < 2 || r < 1 || d < 1 {
            return Err(invalid(format!("polynomial system needs m >= 2, r >= 1, d >= 1 (got m={m}, r={r}, d={d})")));
        }
        Ok(PolySystem { kind, m, r, d })
    }

    fn has_q1(&self) -> bool {
        self.kind == GatingCombo::SS
    }

    fn has_q23(&self) -> bool {
        self.kind != GatingCombo::LL
    }

    /// Equation indices `(rho1, rho2)` in lexicographic order. For the
    /// Laplace-Laplace system `rho1` is empty.
    pub fn equations(&self) -> Vec<(Vec<u32>, u32)> {
        let r = self.r as u32;
        if self.kind == GatingCombo::LL {
            return (1..=r).map(|rho| (Vec::new(), rho)).collect();
        }
        let mut out = Vec::new();
        for total in 0..=r {
            for rho1 in compositions(self.d, total) {
                for rho2 in 0..=(r - total) {
                    if total + rho2 >= 1 {
                        out.push((rho1.clone(), rho2));
                    }
                }
            }
        }
        out.sort();
        out
    }
}

/// All `v` in `N^d` with `|v| = total`.
fn compositions(d: usize, total: u32) -> Vec<Vec<u32>> {
    if d == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(d - 1, total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// One monomial of an equation. Vectors that the system does not use are
/// empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Term {
    pub a1: Vec<u32>,
    pub a2: Vec<u32>,
    pub a3: Vec<u32>,
    pub a4: u32,
    pub a5: u32,
}

impl Term {
    /// `1 / (a1! a2! a3! a4! a5!)` with vector factorials taken componentwise.
    pub fn coefficient(&self) -> f64 {
        let denom: f64 = self
            .a1
            .iter()
            .chain(&self.a2)
            .chain(&self.a3)
            .chain([&self.a4, &self.a5])
            .map(|&k| factorial(k))
            .product();
        1.0 / denom
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// All index tuples of equation `(rho1, rho2)`. Returns an empty list when
/// the index lies outside `1 <= |rho1| + rho2 <= r` or has the wrong shape.
pub fn enumerate_terms(sys: &PolySystem, rho1: &[u32], rho2: u32) -> Vec<Term> {
    let total = rho1.iter().sum::<u32>() + rho2;
    if total < 1 || total as usize > sys.r {
        return Vec::new();
    }
    if sys.kind == GatingCombo::LL {
        if !rho1.is_empty() {
            return Vec::new();
        }
        return (0..=rho2 / 2)
            .map(|a5| Term { a1: vec![], a2: vec![], a3: vec![], a4: rho2 - 2 * a5, a5 })
            .collect();
    }
    if rho1.len() != sys.d {
        return Vec::new();
    }
    // Per coordinate, the ways to split rho1_k into (a1_k, a2_k, a3_k).
    let splits: Vec<Vec<(u32, u32, u32)>> = rho1
        .iter()
        .map(|&k| {
            let mut v = Vec::new();
            for a3 in 0..=k {
                if sys.has_q1() {
                    for a1 in 0..=(k - a3) {
                        v.push((a1, k - a3 - a1, a3));
                    }
                } else {
                    v.push((0, k - a3, a3));
                }
            }
            v
        })
        .collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; sys.d];
    loop {
        let picked: Vec<(u32, u32, u32)> = idx.iter().zip(&splits).map(|(&i, s)| s[i]).collect();
        let a3: Vec<u32> = picked.iter().map(|t| t.2).collect();
        let a3_sum: u32 = a3.iter().sum();
        if a3_sum <= rho2 {
            let rest = rho2 - a3_sum;
            for a5 in 0..=rest / 2 {
                out.push(Term {
                    a1: if sys.has_q1() { picked.iter().map(|t| t.0).collect() } else { vec![] },
                    a2: picked.iter().map(|t| t.1).collect(),
                    a3: a3.clone(),
                    a4: rest - 2 * a5,
                    a5,
                });
            }
        }
        // Odometer over the per-coordinate splits.
        let mut k = 0;
        loop {
            if k == sys.d {
                out.sort();
                return out;
            }
            idx[k] += 1;
            if idx[k] < splits[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Values of the unknowns. Fields not used by the system kind are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub p: Vec<f64>,
    #[serde(default)]
    pub q1: Vec<Vec<f64>>,
    #[serde(default)]
    pub q2: Vec<f64>,
    #[serde(default)]
    pub q3: Vec<Vec<f64>>,
    pub q4: Vec<f64>,
    pub q5: Vec<f64>,
}

impl CandidateSolution {
    /// The trivial candidate: `p = 1`, every `q = 0`.
    pub fn zeros(sys: &PolySystem) -> Self {
        let (m, d) = (sys.m, sys.d);
        CandidateSolution {
            p: vec![1.0; m],
            q1: if sys.has_q1() { vec![vec![0.0; d]; m] } else { vec![] },
            q2: if sys.has_q23() { vec![0.0; d] } else { vec![] },
            q3: if sys.has_q23() { vec![vec![0.0; d]; m] } else { vec![] },
            q4: vec![0.0; m],
            q5: vec![0.0; m],
        }
    }

    /// A candidate that only sets `p, q4, q5`, shaped for `sys`.
    pub fn scalar(sys: &PolySystem, p: Vec<f64>, q4: Vec<f64>, q5: Vec<f64>) -> Self {
        CandidateSolution { p, q4, q5, ..Self::zeros(sys) }
    }

    /// Drops the unknowns that `kind` does not use.
    pub fn restricted_to(&self, kind: GatingCombo) -> Self {
        let mut c = self.clone();
        if kind != GatingCombo::SS {
            c.q1.clear();
        }
        if kind == GatingCombo::LL {
            c.q2.clear();
            c.q3.clear();
        }
        c
    }

    fn check(&self, sys: &PolySystem) -> Result<()> {
        let (m, d) = (sys.m, sys.d);
        let vecs_ok = |v: &Vec<Vec<f64>>, used: bool| {
            if used {
                v.len() == m && v.iter().all(|x| x.len() == d)
            } else {
                v.is_empty()
            }
        };
        let ok = self.p.len() == m
            && self.q4.len() == m
            && self.q5.len() == m
            && vecs_ok(&self.q1, sys.has_q1())
            && vecs_ok(&self.q3, sys.has_q23())
            && self.q2.len() == if sys.has_q23() { d } else { 0 };
        if !ok {
            return Err(invalid(format!("candidate shape does not match {} system with m={m}, d={d}", sys.kind)));
        }
        let finite = self
            .p
            .iter()
            .chain(self.q1.iter().flatten())
            .chain(&self.q2)
            .chain(self.q3.iter().flatten())
            .chain(&self.q4)
            .chain(&self.q5)
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("candidate has non-finite entries"));
        }
        Ok(())
    }

    /// Per-atom variable vector in the layout `[q1, q2, q3, q4, q5]`, with
    /// unused blocks filled by zeros.
    fn atom_vars(&self, sys: &PolySystem, i: usize) -> Vec<f64> {
        let d = sys.d;
        let mut z = Vec::with_capacity(3 * d + 2);
        if sys.has_q1() {
            z.extend(&self.q1[i]);
        } else {
            z.extend(std::iter::repeat_n(0.0, d));
        }
        if sys.has_q23() {
            z.extend(&self.q2);
            z.extend(&self.q3[i]);
        } else {
            z.extend(std::iter::repeat_n(0.0, 2 * d));
        }
        z.push(self.q4[i]);
        z.push(self.q5[i]);
        z
    }
}

/// An equation compiled to `(coefficient, exponents over [q1, q2, q3, q4, q5])`.
#[derive(Clone, Debug)]
struct Compiled {
    d: usize,
    equations: Vec<Vec<(f64, Vec<u32>)>>,
}

impl Compiled {
    fn new(sys: &PolySystem, derivative_scale: bool) -> Self {
        let d = sys.d;
        let equations = sys
            .equations()
            .iter()
            .map(|(rho1, rho2)| {
                let w = if derivative_scale {
                    rho1.iter().chain([rho2]).map(|&k| factorial(k)).product()
                } else {
                    1.0
                };
                enumerate_terms(sys, rho1, *rho2)
                    .into_iter()
                    .map(|t| {
                        let mut e = vec![0u32; 3 * d + 2];
                        for k in 0..d {
                            e[k] = t.a1.get(k).copied().unwrap_or(0);
                            e[d + k] = t.a2.get(k).copied().unwrap_or(0);
                            e[2 * d + k] = t.a3.get(k).copied().unwrap_or(0);
                        }
                        e[3 * d] = t.a4;
                        e[3 * d + 1] = t.a5;
                        (w * t.coefficient(), e)
                    })
                    .collect()
            })
            .collect();
        Compiled { d, equations }
    }

    fn nvars(&self) -> usize {
        3 * self.d + 2
    }

    /// Sum of the equation's terms at `z`, and optionally its gradient in `z`.
    fn eval(&self, eq: usize, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut val = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.fill(0.0);
        }
        for (c, e) in &self.equations[eq] {
            let mono: f64 = e.iter().zip(z).map(|(&k, &x)| x.powi(k as i32)).product();
            val += c * mono;
            if let Some(g) = g.as_deref_mut() {
                for v in 0..z.len() {
                    if e[v] == 0 {
                        continue;
                    }
                    let mut part = c * f64::from(e[v]) * z[v].powi(e[v] as i32 - 1);
                    for (w, (&k, &x)) in e.iter().zip(z).enumerate() {
                        if w != v {
                            part *= x.powi(k as i32);
                        }
                    }
                    g[v] += part;
                }
            }
        }
        val
    }
}

fn eval_all(sys: &PolySystem, sol: &CandidateSolution, derivative_scale: bool) -> Result<Vec<f64>> {
    sol.check(sys)?;
    let comp = Compiled::new(sys, derivative_scale);
    let zs: Vec<Vec<f64>> = (0..sys.m).map(|i| sol.atom_vars(sys, i)).collect();
    Ok((0..comp.equations.len())
        .map(|eq| zs.iter().zip(&sol.p).map(|(z, p)| p * p * comp.eval(eq, z, None)).sum())
        .collect())
}

/// One residual per equation of [`PolySystem::equations`].
pub fn residuals(sys: &PolySystem, sol: &CandidateSolution) -> Result<Vec<f64>> {
    eval_all(sys, sol, false)
}

/// Residuals multiplied by `rho1! rho2!`, i.e. the mixed derivatives at zero
/// of `sum_i p_i^2 exp(<q1_i + q2, s> + <q3_i, s> t + q4_i t + q5_i t^2)`.
/// Same zero set as [`residuals`]; the search minimizes and reports these so
/// high-order equations are not shrunk by their factorials.
pub fn scaled_residuals(sys: &PolySystem, sol: &CandidateSolution) -> Result<Vec<f64>> {
    eval_all(sys, sol, true)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// All weights bounded away from zero and at least one `q4` bounded away
/// from zero.
pub fn is_nontrivial(sol: &CandidateSolution, tol: f64) -> bool {
    let min_p = sol.p.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let max_q4 = sol.q4.iter().map(|v| v.abs()).fold(0.0, f64::max);
    min_p > tol && max_q4 > tol
}

/// Settings of [`search_nontrivial`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Half-width of the uniform box for starting points.
    pub init_box: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { restarts: 200, seed: 0, max_iters: 300, init_box: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub found: Option<CandidateSolution>,
    /// Norm of [`scaled_residuals`] at the best candidate.
    pub best_residual: f64,
    /// Norm of [`residuals`] at the best candidate.
    pub best_raw_residual: f64,
    pub best: CandidateSolution,
    /// Restarts actually run (the search stops at the first solution).
    pub attempts: usize,
}

/// Search parameterization. `p_i = mid + half * tanh(u_i)` keeps every weight
/// in `[P_MIN, P_MAX]`; `q4_0 = 1` fixes the scale of the `(q3, q4, q5)`
/// directions, which every system is invariant under up to relabeling and
/// rescaling. The free vector is `[u, q1, q2, q3, q4_1.., q5]`.
struct Param<'a> {
    sys: &'a PolySystem,
}

impl Param<'_> {
    fn len(&self) -> usize {
        let (m, d) = (self.sys.m, self.sys.d);
        let mut n = m + (m - 1) + m;
        if self.sys.has_q1() {
            n += m * d;
        }
        if self.sys.has_q23() {
            n += d + m * d;
        }
        n
    }

    fn decode(&self, v: &[f64]) -> (CandidateSolution, Vec<f64>) {
        let (m, d) = (self.sys.m, self.sys.d);
        let mid = 0.5 * (P_MIN + P_MAX);
        let half = 0.5 * (P_MAX - P_MIN);
        let mut it = v.iter().copied();
        let mut dp = Vec::with_capacity(m);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let t = it.next().unwrap().tanh();
                dp.push(half * (1.0 - t * t));
                mid + half * t
            })
            .collect();
        let mut take = |k: usize| -> Vec<f64> { (0..k).map(|_| it.next().unwrap()).collect() };
        let q1 = if self.sys.has_q1() { (0..m).map(|_| take(d)).collect() } else { vec![] };
        let (q2, q3) = if self.sys.has_q23() { (take(d), (0..m).map(|_| take(d)).collect()) } else { (vec![], vec![]) };
        let mut q4 = vec![1.0];
        q4.extend(take(m - 1));
        let q5 = take(m);
        (CandidateSolution { p, q1, q2, q3, q4, q5 }, dp)
    }

    /// Residuals and their Jacobian with respect to the free vector.
    fn residual_jacobian(&self, comp: &Compiled, v: &[f64]) -> (CandidateSolution, DVector<f64>, DMatrix<f64>) {
        let sys = self.sys;
        let (m, d) = (sys.m, sys.d);
        let (c, dp) = self.decode(v);
        let neq = comp.equations.len();
        let nz = comp.nvars();
        let mut res = DVector::zeros(neq);
        let mut jac = DMatrix::zeros(neq, v.len());
        let mut g = vec![0.0; nz];
        let zs: Vec<Vec<f64>> = (0..m).map(|i| c.atom_vars(sys, i)).collect();
        // Offsets of blocks in the free vector.
        let off_q1 = m;
        let off_q2 = off_q1 + if sys.has_q1() { m * d } else { 0 };
        let off_q3 = off_q2 + if sys.has_q23() { d } else { 0 };
        let off_q4 = off_q3 + if sys.has_q23() { m * d } else { 0 };
        let off_q5 = off_q4 + (m - 1);
        for eq in 0..neq {
            for i in 0..m {
                let p2 = c.p[i] * c.p[i];
                let s = comp.eval(eq, &zs[i], Some(&mut g));
                res[eq] += p2 * s;
                jac[(eq, i)] += 2.0 * c.p[i] * s * dp[i];
                for k in 0..d {
                    if sys.has_q1() {
                        jac[(eq, off_q1 + i * d + k)] += p2 * g[k];
                    }
                    if sys.has_q23() {
                        jac[(eq, off_q2 + k)] += p2 * g[d + k];
                        jac[(eq, off_q3 + i * d + k)] += p2 * g[2 * d + k];
                    }
                }
                if i > 0 {
                    jac[(eq, off_q4 + i - 1)] += p2 * g[3 * d];
                }
                jac[(eq, off_q5 + i)] += p2 * g[3 * d + 1];
            }
        }
        (c, res, jac)
    }
}

/// Levenberg–Marquardt from one start. Returns the final free vector and
/// residual norm.
fn local_solve(param: &Param, comp: &Compiled, mut v: Vec<f64>, max_iters: usize) -> (Vec<f64>, f64) {
    let (_, mut r, mut j) = param.residual_jacobian(comp, &v);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..max_iters {
        if cost.sqrt() < 1e-14 {
            break;
        }
        let Some(step) = damped_gauss_newton_step(&j, &r, lambda) else {
            lambda *= 10.0;
            continue;
        };
        let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let (_, rt, jt) = param.residual_jacobian(comp, &trial);
        let ct = rt.norm_squared();
        if ct.is_finite() && ct < cost {
            let rel = (cost - ct) / cost.max(f64::MIN_POSITIVE);
            v = trial;
            r = rt;
            j = jt;
            cost = ct;
            lambda = (lambda / 3.0).max(1e-15);
            if rel < 1e-14 && step.norm() < 1e-14 {
                break;
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (v, cost.sqrt())
}

/// Minimizes the squared norm of [`scaled_residuals`] over non-trivial candidates from
/// `cfg.restarts` random starts. Stops at the first start whose residual
/// norm falls below [`SOLVED_TOL`]. A failed search is numerical evidence
/// that no non-trivial solution exists, not a proof.
pub fn search_nontrivial(sys: &PolySystem, cfg: &SearchConfig) -> Result<SearchOutcome> {
    if cfg.restarts == 0 {
        return Err(invalid("restarts must be >= 1"));
    }
    let comp = Compiled::new(sys, true);
    let param = Param { sys };
    let n = param.len();
    // Restarts run in parallel chunks; the outcome is the first solving
    // restart by index, so it does not depend on scheduling.
    let chunk = rayon::current_num_threads().max(1) * 2;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut start = 0;
    while start < cfg.restarts {
        let end = (start + chunk).min(cfg.restarts);
        let runs: Vec<(Vec<f64>, f64)> = (start..end)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::stream(cfg.seed, k as u64);
                let v0: Vec<f64> = (0..n).map(|_| rng.random_range(-cfg.init_box..=cfg.init_box)).collect();
                local_solve(&param, &comp, v0, cfg.max_iters)
            })
            .collect();
        for (k, (v, r)) in runs.into_iter().enumerate() {
            if best.as_ref().is_none_or(|(b, _)| r < *b) {
                best = Some((r, v));
            }
            if r < SOLVED_TOL {
                let (best_norm, v) = best.unwrap();
                let sol = param.decode(&v).0;
                return Ok(SearchOutcome {
                    found: Some(sol.clone()),
                    best_residual: best_norm,
                    best_raw_residual: norm(&residuals(sys, &sol)?),
                    best: sol,
                    attempts: start + k + 1,
                });
            }
        }
        start = end;
    }
    let (best_norm, v) = best.expect("at least one restart");
    let sol = param.decode(&v).0;
    Ok(SearchOutcome {
        found: None,
        best_residual: best_norm,
        best_raw_residual: norm(&residuals(sys, &sol)?),
        best: sol,
        attempts: cfg.restarts,
    })
}

/// JSON report written by the `polysys` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyReport {
    pub kind: GatingCombo,
    pub m: usize,
    pub r: usize,
    pub d: usize,
    pub found: bool,
    pub best_residual: f64,
    pub best_raw_residual: f64,
    pub attempts: usize,
    pub seed: u64,
    /// Always "evidence": a failed search does not certify insolvability.
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution: Option<CandidateSolution>,
}

impl PolyReport {
    pub fn new(sys: &PolySystem, cfg: &SearchConfig, out: &SearchOutcome) -> Self {
        PolyReport {
            kind: sys.kind,
            m: sys.m,
            r: sys.r,
            d: sys.d,
            found: out.found.is_some(),
            best_residual: out.best_residual,
            best_raw_residual: out.best_raw_residual,
            attempts: out.attempts,
            seed: cfg.seed,
            label: "evidence".into(),
            solution: out.found.clone(),
        }
    }
}

/// The constructive solution for `m = 2` that solves every system up to
/// order 3: `p = (1, 1)`, `q4 = (1, -1)`, `q5 = (-1/2, -1/2)`.
pub fn known_solution_m2(sys: &PolySystem) -> CandidateSolution {
    CandidateSolution::scalar(sys, vec![1.0, 1.0], vec![1.0, -1.0], vec![-0.5, -0.5])
}

/// The `m = 3` candidate `p = 1`, `q4 = (sqrt(3)/3, -sqrt(3)/3, 0)`,
/// `q5 = (-1/6, -1/6, 0)`. Its third atom has `q4 = q5 = 0` and drops out of
/// every equation, so it only solves orders up to 3: the order-4 residual
/// is `-1/54`.
pub fn constructive_candidate_m3(sys: &PolySystem) -> CandidateSolution {
    let s = 3f64.sqrt() / 3.0;
    CandidateSolution::scalar(sys, vec![1.0; 3], vec![s, -s, 0.0], vec![-1.0 / 6.0, -1.0 / 6.0, 0.0])
}

/// A non-trivial `m = 3` solution of every system up to order 5, built from
/// the three-point Gauss-Hermite rule: nodes `(1, -1, 0)` and weights
/// `(1/6, 1/6, 2/3)` of `N(0, 1/3)` give `q4 = nodes`, `p^2 = weights` and
/// `q5 = -1/6` for every atom, since `exp(x t - t^2 / 6)` then has matched
/// moments through order 5.
pub fn gauss_hermite_solution_m3(sys: &PolySystem) -> CandidateSolution {
    let p = vec![(1.0f64 / 6.0).sqrt(), (1.0f64 / 6.0).sqrt(), (2.0f64 / 3.0).sqrt()];
    CandidateSolution::scalar(sys, p, vec![1.0, -1.0, 0.0], vec![-1.0 / 6.0; 3])
}
