//! Two-level token routing: an outer gate sends tokens to expert groups, an
//! inner gate per group sends them on to experts, and the expert outputs are
//! combined back level by level. Capacities are per expert and per batch row.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{log_sum_exp, GateKind};
use crate::rng;

/// Tokens laid out as `B x N x D`, row major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || seq == 0 || dim == 0 {
            return Err(invalid("token batch dimensions must be at least 1"));
        }
        if data.len() != batch * seq * dim {
            return Err(invalid(format!("token data has {} values, expected {}", data.len(), batch * seq * dim)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tokens must be finite"));
        }
        Ok(TokenBatch { batch, seq, dim, data })
    }

    pub fn zeros(batch: usize, seq: usize, dim: usize) -> Self {
        TokenBatch { batch, seq, dim, data: vec![0.0; batch * seq * dim] }
    }

    pub fn token(&self, b: usize, n: usize) -> &[f64] {
        let i = (b * self.seq + n) * self.dim;
        &self.data[i..i + self.dim]
    }

    fn token_mut(&mut self, b: usize, n: usize) -> &mut [f64] {
        let i = (b * self.seq + n) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

/// Per-expert tokens laid out as `E x B x C x D`; unfilled slots are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouped {
    pub experts: usize,
    pub batch: usize,
    pub capacity: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Grouped {
    pub fn zeros(experts: usize, batch: usize, capacity: usize, dim: usize) -> Self {
        Grouped { experts, batch, capacity, dim, data: vec![0.0; experts * batch * capacity * dim] }
    }

    pub fn slot(&self, e: usize, b: usize, c: usize) -> &[f64] {
        let i = ((e * self.batch + b) * self.capacity + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn slot_mut(&mut self, e: usize, b: usize, c: usize) -> &mut [f64] {
        let i = ((e * self.batch + b) * self.capacity + c) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    /// The slots of expert `e` viewed as a `B x C x D` token batch.
    pub fn expert_tokens(&self, e: usize) -> TokenBatch {
        let len = self.batch * self.capacity * self.dim;
        TokenBatch { batch: self.batch, seq: self.capacity, dim: self.dim, data: self.data[e * len..(e + 1) * len].to_vec() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteGateKind {
    /// Logits `W x + b`.
    SoftmaxLinear,
    /// Logits `-||w_e - x|| + b_e`.
    Laplace,
}

impl From<RouteGateKind> for GateKind {
    fn from(k: RouteGateKind) -> GateKind {
        match k {
            RouteGateKind::SoftmaxLinear => GateKind::Softmax,
            RouteGateKind::Laplace => GateKind::Laplace,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub e_outer: usize,
    pub e_inner: usize,
    pub cap_outer: usize,
    pub cap_inner: usize,
    pub topk_outer: usize,
    pub topk_inner: usize,
    pub gate_outer_kind: RouteGateKind,
    pub gate_inner_kind: RouteGateKind,
    /// Scale of the summed gate losses.
    pub loss_scale: f64,
    #[serde(default = "default_true")]
    pub renormalize_topk: bool,
    /// Seed of the random gate parameters.
    #[serde(default)]
    pub seed: u64,
}

impl RouteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_outer == 0 || self.e_inner == 0 {
            return Err(invalid("expert counts must be at least 1"));
        }
        if self.topk_outer == 0 || self.topk_outer > self.e_outer {
            return Err(invalid("topk_outer must lie in 1..=e_outer"));
        }
        if self.topk_inner == 0 || self.topk_inner > self.e_inner {
            return Err(invalid("topk_inner must lie in 1..=e_inner"));
        }
        if !self.loss_scale.is_finite() {
            return Err(invalid("loss_scale must be finite"));
        }
        Ok(())
    }
}

/// Gate parameters of one level: one location (or weight row) and one bias
/// per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub kind: RouteGateKind,
    pub dim: usize,
    /// `E x D`, row major.
    pub loc: Vec<f64>,
    pub bias: Vec<f64>,
}

impl GateParams {
    pub fn new(kind: RouteGateKind, dim: usize, loc: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if dim == 0 || bias.is_empty() || loc.len() != bias.len() * dim {
            return Err(invalid("gate parameters must be shaped (experts x D) plus one bias per expert"));
        }
        Ok(GateParams { kind, dim, loc, bias })
    }

    /// Weights `N(0, 1/D)` for the linear gate, locations `N(0, 1)` for the
    /// Laplace gate, zero biases.
    pub fn random(kind: RouteGateKind, experts: usize, dim: usize, rng: &mut rng::Rng) -> Self {
        let sd = match kind {
            RouteGateKind::SoftmaxLinear => 1.0 / (dim as f64).sqrt(),
            RouteGateKind::Laplace => 1.0,
        };
        let normal = Normal::new(0.0, sd).expect("positive sd");
        let loc = (0..experts * dim).map(|_| normal.sample(rng)).collect();
        GateParams { kind, dim, loc, bias: vec![0.0; experts] }
    }

    pub fn experts(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let kind = GateKind::from(self.kind);
        (0..self.experts()).map(|e| kind.logit(&self.loc[e * self.dim..(e + 1) * self.dim], self.bias[e], x)).collect()
    }
}

/// Outer gate plus one inner gate per outer expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteParams {
    pub outer: GateParams,
    pub inner: Vec<GateParams>,
}

impl RouteParams {
    pub fn random(cfg: &RouteConfig, dim: usize) -> Self {
        let mut r = rng::stream(cfg.seed, 0);
        let outer = GateParams::random(cfg.gate_outer_kind, cfg.e_outer, dim, &mut r);
        let inner = (0..cfg.e_outer).map(|_| GateParams::random(cfg.gate_inner_kind, cfg.e_inner, dim, &mut r)).collect();
        RouteParams { outer, inner }
    }

    fn check(&self, cfg: &RouteConfig, dim: usize) -> Result<()> {
        let ok = |g: &GateParams, e: usize| g.experts() == e && g.dim == dim;
        if !ok(&self.outer, cfg.e_outer) || self.inner.len() != cfg.e_outer || !self.inner.iter().all(|g| ok(g, cfg.e_inner)) {
            return Err(invalid("route parameters do not match the configuration and token dimension"));
        }
        if self.outer.kind != cfg.gate_outer_kind || self.inner.iter().any(|g| g.kind != cfg.gate_inner_kind) {
            return Err(invalid("route parameter gate kinds do not match the configuration"));
        }
        Ok(())
    }
}

/// One accepted `(token, expert)` route.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub b: usize,
    pub n: usize,
    pub expert: usize,
    pub slot: usize,
    /// Combine weight: the (possibly renormalized) gate probability.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub batch: usize,
    pub seq: usize,
    pub experts: usize,
    pub capacity: usize,
    /// Accepted routes in token order.
    pub routes: Vec<Route>,
    /// `(b, n, expert)` selections that found the expert full.
    pub dropped: Vec<(usize, usize, usize)>,
    pub gate_loss: f64,
    /// Top-1 expert of every routed token (`None` for masked tokens).
    pub top1: Vec<Option<usize>>,
}

impl DispatchPlan {
    /// Number of slots filled for `(expert, b)`.
    pub fn load(&self, expert: usize, b: usize) -> usize {
        self.routes.iter().filter(|r| r.expert == expert && r.b == b).count()
    }

    /// Dense `B x N x E x C` 0/1 dispatch tensor.
    pub fn dense_dispatch(&self) -> Vec<f64> {
        self.dense(|_| 1.0)
    }

    /// Dense `B x N x E x C` combine tensor.
    pub fn dense_combine(&self) -> Vec<f64> {
        self.dense(|r| r.weight)
    }

    fn dense(&self, f: impl Fn(&Route) -> f64) -> Vec<f64> {
        let (e, c) = (self.experts, self.capacity);
        let mut t = vec![0.0; self.batch * self.seq * e * c];
        for r in &self.routes {
            t[((r.b * self.seq + r.n) * e + r.expert) * c + r.slot] = f(r);
        }
        t
    }
}

/// Load-balance loss `E * sum_e f_e * p_e`, where `f_e` is the share of
/// tokens whose top choice is `e` and `p_e` the mean gate probability of `e`.
/// Zero when no token is routed.
pub fn aux_loss(probs: &[Vec<f64>], top1: &[usize], experts: usize) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let t = probs.len() as f64;
    let mut f = vec![0.0; experts];
    let mut p = vec![0.0; experts];
    for (row, &k) in probs.iter().zip(top1) {
        f[k] += 1.0 / t;
        for (pe, &v) in p.iter_mut().zip(row) {
            *pe += v / t;
        }
    }
    experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Routes every token (optionally only those where `mask` is true) to its
/// top-`k` experts and fills each expert's `capacity` slots per batch row in
/// token order; later selections of a full expert are dropped.
pub fn gate(
    params: &GateParams,
    tokens: &TokenBatch,
    topk: usize,
    capacity: usize,
    renormalize: bool,
    mask: Option<&[bool]>,
) -> Result<DispatchPlan> {
    let e = params.experts();
    if params.dim != tokens.dim {
        return Err(invalid("gate dimension does not match the tokens"));
    }
    if topk == 0 || topk > e {
        return Err(invalid("topk must lie in 1..=experts"));
    }
    if mask.is_some_and(|m| m.len() != tokens.batch * tokens.seq) {
        return Err(invalid("mask length does not match the tokens"));
    }
    let mut plan = DispatchPlan {
        batch: tokens.batch,
        seq: tokens.seq,
        experts: e,
        capacity,
        routes: Vec::new(),
        dropped: Vec::new(),
        gate_loss: 0.0,
        top1: vec![None; tokens.batch * tokens.seq],
    };
    let mut all_probs = Vec::new();
    let mut top1 = Vec::new();
    for b in 0..tokens.batch {
        let mut fill = vec![0usize; e];
        for n in 0..tokens.seq {
            if mask.is_some_and(|m| !m[b * tokens.seq + n]) {
                continue;
            }
            let logits = params.logits(tokens.token(b, n));
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite gate logit at token ({b}, {n})")));
            }
            let lse = log_sum_exp(&logits);
            let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            let chosen = top_k(&probs, topk);
            let norm = if renormalize { chosen.iter().map(|&k| probs[k]).sum::<f64>() } else { 1.0 };
            for &k in &chosen {
                if fill[k] < capacity {
                    plan.routes.push(Route { b, n, expert: k, slot: fill[k], weight: probs[k] / norm });
                    fill[k] += 1;
                } else {
                    plan.dropped.push((b, n, k));
                }
            }
            plan.top1[b * tokens.seq + n] = Some(chosen[0]);
            top1.push(chosen[0]);
            all_probs.push(probs);
        }
    }
    plan.gate_loss = aux_loss(&all_probs, &top1, e);
    Ok(plan)
}

fn check_plan_tokens(plan: &DispatchPlan, batch: usize, seq: usize) -> Result<()> {
    if plan.batch != batch || plan.seq != seq {
        return Err(invalid(format!("plan is for {}x{} tokens, got {batch}x{seq}", plan.batch, plan.seq)));
    }
    Ok(())
}

/// Scatters tokens into their expert slots.
pub fn dispatch(plan: &DispatchPlan, tokens: &TokenBatch) -> Result<Grouped> {
    check_plan_tokens(plan, tokens.batch, tokens.seq)?;
    let mut out = Grouped::zeros(plan.experts, plan.batch, plan.capacity, tokens.dim);
    for r in &plan.routes {
        out.slot_mut(r.expert, r.b, r.slot).copy_from_slice(tokens.token(r.b, r.n));
    }
    Ok(out)
}

/// Gathers expert outputs back to tokens, weighting each route by its
/// combine weight. Tokens with no accepted route get zero.
pub fn combine(plan: &DispatchPlan, outputs: &Grouped) -> Result<TokenBatch> {
    if outputs.experts != plan.experts || outputs.batch != plan.batch || outputs.capacity != plan.capacity {
        return Err(invalid("expert outputs do not match the plan's E x B x C shape"));
    }
    let mut out = TokenBatch::zeros(plan.batch, plan.seq, outputs.dim);
    for r in &plan.routes {
        let src = outputs.slot(r.expert, r.b, r.slot);
        for (o, s) in out.token_mut(r.b, r.n).iter_mut().zip(src) {
            *o += r.weight * s;
        }
    }
    Ok(out)
}

/// Slot occupancy of a grouped tensor, as a mask over the `B x C` slots of
/// each expert.
fn occupancy(plan: &DispatchPlan) -> Vec<Vec<bool>> {
    let mut occ = vec![vec![false; plan.batch * plan.capacity]; plan.experts];
    for r in &plan.routes {
        occ[r.expert][r.b * plan.capacity + r.slot] = true;
    }
    occ
}

/// Everything a forward pass produced besides the output tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub outer: DispatchPlan,
    /// Inner plan of every outer expert; its tokens are that expert's slots.
    pub inner: Vec<DispatchPlan>,
    pub outer_loss: f64,
    /// Mean of the inner gate losses over outer experts.
    pub inner_loss: f64,
    pub total_loss: f64,
}

/// Two-level forward pass. `expert(o, i, x, out)` writes the output of
/// inner expert `i` of group `o` for input `x`. Only occupied slots reach the
/// inner gates and the experts.
pub fn hmoe_forward<F>(
    tokens: &TokenBatch,
    cfg: &RouteConfig,
    params: &RouteParams,
    expert: F,
) -> Result<(TokenBatch, ForwardTrace)>
where
    F: Fn(usize, usize, &[f64], &mut [f64]),
{
    cfg.validate()?;
    params.check(cfg, tokens.dim)?;
    let outer = gate(&params.outer, tokens, cfg.topk_outer, cfg.cap_outer, cfg.renormalize_topk, None)?;
    let xo = dispatch(&outer, tokens)?;
    let occ = occupancy(&outer);
    let mut yo = Grouped::zeros(cfg.e_outer, tokens.batch, cfg.cap_outer, tokens.dim);
    let mut inner_plans = Vec::with_capacity(cfg.e_outer);
    for o in 0..cfg.e_outer {
        let xe = xo.expert_tokens(o);
        let plan = gate(&params.inner[o], &xe, cfg.topk_inner, cfg.cap_inner, cfg.renormalize_topk, Some(&occ[o]))?;
        let xi = dispatch(&plan, &xe)?;
        let mut yi = Grouped::zeros(cfg.e_inner, tokens.batch, cfg.cap_inner, tokens.dim);
        for r in &plan.routes {
            expert(o, r.expert, xi.slot(r.expert, r.b, r.slot), yi.slot_mut(r.expert, r.b, r.slot));
        }
        let ye = combine(&plan, &yi)?;
        let len = ye.data.len();
        yo.data[o * len..(o + 1) * len].copy_from_slice(&ye.data);
        inner_plans.push(plan);
    }
    let out = combine(&outer, &yo)?;
    let outer_loss = outer.gate_loss;
    let inner_loss = inner_plans.iter().map(|p| p.gate_loss).sum::<f64>() / cfg.e_outer as f64;
    let total_loss = cfg.loss_scale * (outer_loss + inner_loss);
    Ok((out, ForwardTrace { outer, inner: inner_plans, outer_loss, inner_loss, total_loss }))
}

/// Gaussian clusters of tokens: `clusters` centers drawn `N(0, spread^2)`,
/// tokens at a random center plus `N(0, noise^2)`. Returns the batch and the
/// cluster label of every token.
pub fn clustered_tokens(
    batch: usize,
    seq: usize,
    dim: usize,
    clusters: usize,
    spread: f64,
    noise: f64,
    seed: u64,
) -> Result<(TokenBatch, Vec<usize>)> {
    if clusters == 0 {
        return Err(invalid("need at least one cluster"));
    }
    if !(spread >= 0.0) || !(noise >= 0.0) || !spread.is_finite() || !noise.is_finite() {
        return Err(invalid("spread and noise must be finite and non-negative"));
    }
    let mut r = rng::stream(seed, 1);
    let c = Normal::new(0.0, spread).expect("checked");
    let z = Normal::new(0.0, noise).expect("checked");
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| (0..dim).map(|_| c.sample(&mut r)).collect()).collect();
    let mut data = Vec::with_capacity(batch * seq * dim);
    let mut labels = Vec::with_capacity(batch * seq);
    for _ in 0..batch * seq {
        let k = r.random_range(0..clusters);
        labels.push(k);
        data.extend(centers[k].iter().map(|m| m + z.sample(&mut r)));
    }
    Ok((TokenBatch::new(batch, seq, dim, data)?, labels))
}

/// Routing histogram row: how many tokens of `cluster` reached `expert` at
/// `level` ("outer" experts are groups, "inner" experts are `o.i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub level: String,
    pub cluster: usize,
    pub expert: String,
    pub count: usize,
}

/// Counts accepted routes per cluster at both levels.
pub fn routing_histogram(trace: &ForwardTrace, labels: &[usize], clusters: usize) -> Vec<HistogramRow> {
    let seq = trace.outer.seq;
    let e_o = trace.outer.experts;
    let e_i = trace.inner.first().map_or(0, |p| p.experts);
    let mut outer = vec![vec![0usize; e_o]; clusters];
    let mut inner = vec![vec![0usize; e_o * e_i]; clusters];
    // Slot (o, b, c) -> source token, to follow tokens into the inner level.
    let cap = trace.outer.capacity;
    let mut source = vec![None; e_o * trace.outer.batch * cap];
    for r in &trace.outer.routes {
        let k = labels[r.b * seq + r.n];
        outer[k][r.expert] += 1;
        source[(r.expert * trace.outer.batch + r.b) * cap + r.slot] = Some(k);
    }
    for (o, plan) in trace.inner.iter().enumerate() {
        for r in &plan.routes {
            if let Some(k) = source[(o * trace.outer.batch + r.b) * cap + r.n] {
                inner[k][o * e_i + r.expert] += 1;
            }
        }
    }
    let mut rows = Vec::new();
    for k in 0..clusters {
        for o in 0..e_o {
            rows.push(HistogramRow { level: "outer".into(), cluster: k, expert: o.to_string(), count: outer[k][o] });
        }
        for o in 0..e_o {
            for i in 0..e_i {
                rows.push(HistogramRow { level: "inner".into(), cluster: k, expert: format!("{o}.{i}"), count: inner[k][o * e_i + i] });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kind: RouteGateKind, loc: Vec<f64>, bias: Vec<f64>, dim: usize) -> GateParams {
        GateParams::new(kind, dim, loc, bias).unwrap()
    }

    #[test]
    fn one_hot_logits_route_to_argmax() {
        // Logits +-10 from a linear gate on x in {+1, -1}.
        let g = params(RouteGateKind::SoftmaxLinear, vec![10.0, -10.0], vec![0.0, 0.0], 1);
        let t = TokenBatch::new(1, 4, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let p = gate(&g, &t, 1, 8, true, None).unwrap();
        let experts: Vec<usize> = p.routes.iter().map(|r| r.expert).collect();
        assert_eq!(experts, vec![0, 1, 0, 1]);
        assert!(p.routes.iter().all(|r| r.weight == 1.0));
        assert!(p.dropped.is_empty());
    }

    #[test]
    fn zero_capacity_drops_everything() {
        let g = params(RouteGateKind::Laplace, vec![0.0, 1.0], vec![0.0, 0.0], 1);
        let t = TokenBatch::new(2, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = gate(&g, &t, 2, 0, true, None).unwrap();
        assert!(p.routes.is_empty());
        assert_eq!(p.dropped.len(), 12);
        let out = combine(&p, &dispatch(&p, &t).unwrap()).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_balanced_loss_is_one() {
        let e = 4;
        let probs = vec![vec![0.25; e]; 8];
        let top1: Vec<usize> = (0..8).map(|i| i % e).collect();
        assert!((aux_loss(&probs, &top1, e) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn capacity_fills_in_token_order() {
        let g = params(RouteGateKind::SoftmaxLinear, vec![0.0, 0.0], vec![1.0, 0.0], 1);
        let t = TokenBatch::new(1, 3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let p = gate(&g, &t, 1, 2, true, None).unwrap();
        assert_eq!(p.routes.len(), 2);
        assert_eq!((p.routes[1].n, p.routes[1].slot), (1, 1));
        assert_eq!(p.dropped, vec![(0, 2, 0)]);
    }

    #[test]
    fn single_token_single_expert() {
        let g = params(RouteGateKind::Laplace, vec![0.0, 0.0], vec![0.0], 2);
        let t = TokenBatch::new(1, 1, 2, vec![0.3, -0.7]).unwrap();
        let p = gate(&g, &t, 1, 1, true, None).unwrap();
        let x = dispatch(&p, &t).unwrap();
        assert_eq!(x.slot(0, 0, 0), &[0.3, -0.7]);
    }

    #[test]
    fn shape_mismatch() {
        let g = params(RouteGateKind::Laplace, vec![0.0], vec![0.0], 1);
        let t = TokenBatch::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let p = gate(&g, &t, 1, 2, true, None).unwrap();
        let other = TokenBatch::new(1, 3, 1, vec![0.0; 3]).unwrap();
        assert!(dispatch(&p, &other).is_err());
        assert!(combine(&p, &Grouped::zeros(1, 1, 3, 1)).is_err());
        assert!(TokenBatch::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn doubling_experts_double_output() {
        let cfg = RouteConfig {
            e_outer: 3,
            e_inner: 2,
            cap_outer: 16,
            cap_inner: 16,
            topk_outer: 2,
            topk_inner: 2,
            gate_outer_kind: RouteGateKind::SoftmaxLinear,
            gate_inner_kind: RouteGateKind::Laplace,
            loss_scale: 0.01,
            renormalize_topk: true,
            seed: 3,
        };
        let (t, _) = clustered_tokens(2, 5, 3, 2, 2.0, 0.3, 9).unwrap();
        let p = RouteParams::random(&cfg, 3);
        let (out, trace) = hmoe_forward(&t, &cfg, &p, |_, _, x, y| {
            for (o, v) in y.iter_mut().zip(x) {
                *o = 2.0 * v;
            }
        })
        .unwrap();
        for (o, x) in out.data.iter().zip(&t.data) {
            assert!((o - 2.0 * x).abs() < 1e-12);
        }
        assert!((trace.total_loss - 0.01 * (trace.outer_loss + trace.inner_loss)).abs() < 1e-15);
    }
}
