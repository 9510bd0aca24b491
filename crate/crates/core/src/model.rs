//! Mixing measures and the conditional density of the two-level Gaussian HMoE.
//!
//! A [`MixingMeasure`] holds `k1` expert groups. Group `i1` carries the
//! first-level gate atom `(a, b)` and a list of experts; expert `i2` of that
//! group carries its second-level gate atom `(omega, beta)` and the Gaussian
//! regression atom `(eta, tau, nu)`. The conditional density is
//!
//! ```text
//! p(y | x) = sum_i1 g1_i1(x) sum_i2 g2_{i2|i1}(x) N(y; eta^T x + tau, nu)
//! ```
//!
//! where each gate is a softmax over logits that are either linear
//! (`a^T x + b`) or distance based (`-||a - x|| + b`), chosen per level by
//! the [`GatingCombo`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, HmoeError, Result};

/// `ln(1e-300)`: log-densities are clamped here before averaging.
pub const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7;

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Which gate family is used at each level of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GatingCombo {
    /// Softmax gating at both levels.
    SS,
    /// Softmax first level, Laplace second level.
    SL,
    /// Laplace gating at both levels.
    LL,
}

impl GatingCombo {
    pub const ALL: [GatingCombo; 3] = [GatingCombo::SS, GatingCombo::SL, GatingCombo::LL];

    pub fn first_level(self) -> GateKind {
        match self {
            GatingCombo::SS | GatingCombo::SL => GateKind::Softmax,
            GatingCombo::LL => GateKind::Laplace,
        }
    }

    pub fn second_level(self) -> GateKind {
        match self {
            GatingCombo::SS => GateKind::Softmax,
            GatingCombo::SL | GatingCombo::LL => GateKind::Laplace,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GatingCombo::SS => "SS",
            GatingCombo::SL => "SL",
            GatingCombo::LL => "LL",
        }
    }
}

impl fmt::Display for GatingCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GatingCombo {
    type Err = HmoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SS" => Ok(GatingCombo::SS),
            "SL" => Ok(GatingCombo::SL),
            "LL" => Ok(GatingCombo::LL),
            other => Err(invalid(format!("unknown gating combo {other:?} (expected SS, SL or LL)"))),
        }
    }
}

/// Logit family of a single gating level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// `loc^T x + bias`
    Softmax,
    /// `-||loc - x|| + bias`
    Laplace,
}

impl GateKind {
    #[inline]
    pub fn logit(self, loc: &[f64], bias: f64, x: &[f64]) -> f64 {
        match self {
            GateKind::Softmax => dot(loc, x) + bias,
            GateKind::Laplace => -dist(loc, x) + bias,
        }
    }

    /// Gradient of the logit with respect to `loc`, written into `out`.
    /// The Laplace logit is not differentiable at `loc == x`; the zero
    /// subgradient is used there.
    #[inline]
    pub fn logit_loc_grad(self, loc: &[f64], x: &[f64], out: &mut [f64]) {
        match self {
            GateKind::Softmax => out.copy_from_slice(x),
            GateKind::Laplace => {
                let r = dist(loc, x);
                if r < 1e-12 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                } else {
                    for ((o, l), xi) in out.iter_mut().zip(loc).zip(x) {
                        *o = -(l - xi) / r;
                    }
                }
            }
        }
    }
}

/// Which gating level to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    First,
    /// Second level within the given group.
    Second(usize),
}

/// One expert: second-level gate atom plus Gaussian regression atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertAtom {
    pub omega: Vec<f64>,
    pub beta: f64,
    pub eta: Vec<f64>,
    pub tau: f64,
    pub nu: f64,
}

impl ExpertAtom {
    #[inline]
    pub fn mean(&self, x: &[f64]) -> f64 {
        dot(&self.eta, x) + self.tau
    }
}

/// One expert group: first-level gate atom plus its experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAtom {
    pub a: Vec<f64>,
    pub b: f64,
    pub experts: Vec<ExpertAtom>,
}

/// Full parameter set of a two-level HMoE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    pub dim: usize,
    pub groups: Vec<GroupAtom>,
}

/// A mixing measure together with the gating combination it is meant for;
/// this is the on-disk JSON form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureFile {
    pub combo: GatingCombo,
    #[serde(flatten)]
    pub measure: MixingMeasure,
}

impl MeasureFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeasureFile = serde_json::from_str(text)?;
        file.measure.validate()?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl MixingMeasure {
    pub fn new(dim: usize, groups: Vec<GroupAtom>) -> Result<Self> {
        let m = MixingMeasure { dim, groups };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(HmoeError::InvalidModel("dim must be at least 1".into()));
        }
        if self.groups.is_empty() {
            return Err(HmoeError::InvalidModel("k1 must be at least 1".into()));
        }
        for (i1, g) in self.groups.iter().enumerate() {
            if g.a.len() != self.dim {
                return Err(HmoeError::InvalidModel(format!("group {i1}: a has wrong dimension")));
            }
            if !g.b.is_finite() || g.a.iter().any(|v| !v.is_finite()) {
                return Err(HmoeError::InvalidModel(format!("group {i1}: non-finite gate")));
            }
            if g.experts.is_empty() {
                return Err(HmoeError::InvalidModel(format!("group {i1} has no experts")));
            }
            for (i2, e) in g.experts.iter().enumerate() {
                if e.omega.len() != self.dim || e.eta.len() != self.dim {
                    return Err(HmoeError::InvalidModel(format!(
                        "expert ({i1},{i2}): wrong dimension"
                    )));
                }
                let finite = e.beta.is_finite()
                    && e.tau.is_finite()
                    && e.nu.is_finite()
                    && e.omega.iter().chain(&e.eta).all(|v| v.is_finite());
                if !finite {
                    return Err(HmoeError::InvalidModel(format!(
                        "expert ({i1},{i2}): non-finite parameter"
                    )));
                }
                if e.nu <= 0.0 {
                    return Err(HmoeError::InvalidModel(format!(
                        "expert ({i1},{i2}): variance must be positive, got {}",
                        e.nu
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn k1(&self) -> usize {
        self.groups.len()
    }

    pub fn k2_max(&self) -> usize {
        self.groups.iter().map(|g| g.experts.len()).max().unwrap_or(0)
    }

    pub fn num_paths(&self) -> usize {
        self.groups.iter().map(|g| g.experts.len()).sum()
    }

    /// All `(i1, i2)` paths in group-major order.
    pub fn paths(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(i1, g)| (0..g.experts.len()).map(move |i2| (i1, i2)))
            .collect()
    }

    pub fn expert(&self, i1: usize, i2: usize) -> &ExpertAtom {
        &self.groups[i1].experts[i2]
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(invalid(format!("x has dimension {}, model expects {}", x.len(), self.dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x has non-finite entries"));
        }
        Ok(())
    }

    /// Gate logits at one level.
    pub fn gate_logits(&self, combo: GatingCombo, x: &[f64], level: Level) -> Result<Vec<f64>> {
        self.check_x(x)?;
        match level {
            Level::First => {
                let kind = combo.first_level();
                Ok(self.groups.iter().map(|g| kind.logit(&g.a, g.b, x)).collect())
            }
            Level::Second(i1) => {
                let group = self
                    .groups
                    .get(i1)
                    .ok_or_else(|| invalid(format!("group index {i1} out of range")))?;
                let kind = combo.second_level();
                Ok(group.experts.iter().map(|e| kind.logit(&e.omega, e.beta, x)).collect())
            }
        }
    }

    /// Gate weights (a point of the simplex) at one level.
    pub fn gate_weights(&self, combo: GatingCombo, x: &[f64], level: Level) -> Result<Vec<f64>> {
        softmax(&self.gate_logits(combo, x, level)?)
    }

    /// `log p(y | x)` without input validation. Computed in log space.
    pub fn log_density_unchecked(&self, combo: GatingCombo, x: &[f64], y: f64) -> f64 {
        let k1 = self.groups.len();
        let first = combo.first_level();
        let second = combo.second_level();
        let mut l1 = Vec::with_capacity(k1);
        for g in &self.groups {
            l1.push(first.logit(&g.a, g.b, x));
        }
        let lse1 = log_sum_exp(&l1);
        let mut terms = Vec::with_capacity(self.num_paths());
        let mut l2 = Vec::new();
        for (g, lg1) in self.groups.iter().zip(&l1) {
            l2.clear();
            l2.extend(g.experts.iter().map(|e| second.logit(&e.omega, e.beta, x)));
            let lse2 = log_sum_exp(&l2);
            for (e, lg2) in g.experts.iter().zip(&l2) {
                terms.push((lg1 - lse1) + (lg2 - lse2) + log_normal_pdf(y, e.mean(x), e.nu));
            }
        }
        log_sum_exp(&terms)
    }

    pub fn conditional_density(&self, combo: GatingCombo, x: &[f64], y: f64) -> Result<f64> {
        self.check_x(x)?;
        if !y.is_finite() {
            return Err(invalid("y is not finite"));
        }
        Ok(self.log_density_unchecked(combo, x, y).exp())
    }

    /// Mean log conditional density over the rows of `data`. Densities are
    /// floored at `1e-300` before taking the log.
    pub fn log_likelihood(&self, combo: GatingCombo, data: &Dataset) -> Result<f64> {
        if let Some((i1, i2)) = self.paths().into_iter().find(|&(i1, i2)| self.expert(i1, i2).nu <= 0.0) {
            return Err(HmoeError::InvalidModel(format!("expert ({i1},{i2}) has nu <= 0")));
        }
        if data.is_empty() {
            return Err(invalid("empty dataset"));
        }
        if data.dim() != self.dim {
            return Err(invalid("dataset dimension does not match model"));
        }
        let total: f64 = (0..data.len())
            .map(|i| self.log_density_unchecked(combo, data.row(i), data.y[i]).max(LOG_DENSITY_FLOOR))
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Applies the translation normalization: the last first-level atom is
    /// pinned to the origin and, within each group, so is the last expert's
    /// gate atom. Laplace-gated levels only pin the bias since their logits
    /// are translation invariant in the bias alone.
    pub fn normalized(&self, combo: GatingCombo) -> MixingMeasure {
        let mut out = self.clone();
        let last = out.groups.last().expect("k1 >= 1");
        let (a0, b0) = (last.a.clone(), last.b);
        for g in &mut out.groups {
            if combo.first_level() == GateKind::Softmax {
                g.a.iter_mut().zip(&a0).for_each(|(a, s)| *a -= s);
            }
            g.b -= b0;
        }
        for g in &mut out.groups {
            let last = g.experts.last().expect("group has experts");
            let (w0, beta0) = (last.omega.clone(), last.beta);
            for e in &mut g.experts {
                if combo.second_level() == GateKind::Softmax {
                    e.omega.iter_mut().zip(&w0).for_each(|(w, s)| *w -= s);
                }
                e.beta -= beta0;
            }
        }
        out
    }

    pub fn is_normalized(&self, combo: GatingCombo, tol: f64) -> bool {
        let last = self.groups.last().expect("k1 >= 1");
        if last.b.abs() > tol {
            return false;
        }
        if combo.first_level() == GateKind::Softmax && last.a.iter().any(|v| v.abs() > tol) {
            return false;
        }
        self.groups.iter().all(|g| {
            let e = g.experts.last().expect("group has experts");
            e.beta.abs() <= tol
                && (combo.second_level() == GateKind::Laplace || e.omega.iter().all(|v| v.abs() <= tol))
        })
    }

    /// Checks the conditions a ground-truth measure must satisfy: validity,
    /// normalization, distinct experts within each group and input-dependent
    /// gating at both levels.
    pub fn check_truth(&self, combo: GatingCombo) -> Result<()> {
        self.validate()?;
        if !self.is_normalized(combo, 1e-12) {
            return Err(HmoeError::InvalidModel("truth is not normalized".into()));
        }
        for (i1, g) in self.groups.iter().enumerate() {
            for (j, e) in g.experts.iter().enumerate() {
                for f in &g.experts[j + 1..] {
                    if e.eta == f.eta && e.tau == f.tau && e.nu == f.nu {
                        return Err(HmoeError::InvalidModel(format!(
                            "group {i1} has two experts with identical (eta, tau, nu)"
                        )));
                    }
                }
            }
        }
        if self.k1() > 1 && self.groups.iter().all(|g| g.a.iter().all(|&v| v == 0.0)) {
            return Err(HmoeError::InvalidModel("first-level gate does not depend on x".into()));
        }
        let second_all_zero = self
            .groups
            .iter()
            .flat_map(|g| g.experts.iter())
            .all(|e| e.omega.iter().all(|&v| v == 0.0));
        if self.k2_max() > 1 && second_all_zero {
            return Err(HmoeError::InvalidModel("second-level gate does not depend on x".into()));
        }
        Ok(())
    }

    /// Number of free real parameters (gates, slopes, intercepts, variances).
    pub fn parameter_count(&self) -> usize {
        let d = self.dim;
        self.groups
            .iter()
            .map(|g| (d + 1) + g.experts.len() * (2 * d + 3))
            .sum()
    }
}

/// Numerically stable softmax. Rejects non-finite input.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid("softmax input has non-finite entries"));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -LN_SQRT_2PI - 0.5 * var.ln() - r * r / (2.0 * var)
}

#[inline]
pub fn normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    log_normal_pdf(y, mean, var).exp()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
