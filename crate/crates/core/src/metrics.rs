//! Voronoi cells and losses between mixing measures, density distances and
//! expert prediction error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HmoeError, Result};
use crate::model::{dist, dot, log_sum_exp, GatingCombo, MixingMeasure};
use crate::quadrature::{integrate, QuadSpec};

/// Default number of quasi-random probes used to approximate `E_X`.
pub const DEFAULT_PROBES: usize = 512;

/// Assignment of fitted atoms to the true atoms they are nearest to.
///
/// Second-level cells are keyed by the *fitted* group: `second_level[i1][j2]`
/// lists the experts of fitted group `i1` nearest to true expert `j2` of the
/// true group `group_match[i1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    pub first_level: Vec<Vec<usize>>,
    pub group_match: Vec<usize>,
    pub second_level: Vec<Vec<Vec<usize>>>,
}

impl VoronoiAssignment {
    /// Sizes of all second-level cells, as `(i1, j2, |V|)`.
    pub fn cell_sizes(&self) -> Vec<(usize, usize, usize)> {
        self.second_level
            .iter()
            .enumerate()
            .flat_map(|(i1, cells)| cells.iter().enumerate().map(move |(j2, c)| (i1, j2, c.len())))
            .collect()
    }
}

/// Exponents applied to `||d eta||`, `|d tau|`, `|d nu|` in over-specified cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateExponents {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl RateExponents {
    pub const ONES: RateExponents = RateExponents { r1: 1.0, r2: 1.0, r3: 1.0 };

    pub fn new(r1: f64, r2: f64, r3: f64) -> Result<Self> {
        if [r1, r2, r3].iter().any(|r| !(r.is_finite() && *r >= 1.0)) {
            return Err(invalid("rate exponents must be finite and >= 1"));
        }
        Ok(RateExponents { r1, r2, r3 })
    }
}

fn argmin_lowest<I: Iterator<Item = f64>>(it: I) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, d) in it.enumerate() {
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn zeta_dist(
    fitted: &crate::model::ExpertAtom,
    truth: &crate::model::ExpertAtom,
) -> f64 {
    let mut s = 0.0;
    for (a, b) in fitted.omega.iter().zip(&truth.omega) {
        s += (a - b) * (a - b);
    }
    for (a, b) in fitted.eta.iter().zip(&truth.eta) {
        s += (a - b) * (a - b);
    }
    s += (fitted.tau - truth.tau).powi(2);
    s += (fitted.nu - truth.nu).powi(2);
    s.sqrt()
}

/// Voronoi cells of `g` generated by the atoms of `truth`. Ties go to the
/// lowest true index.
pub fn voronoi_cells(g: &MixingMeasure, truth: &MixingMeasure) -> Result<VoronoiAssignment> {
    if g.dim != truth.dim {
        return Err(invalid("measures have different dimensions"));
    }
    let group_match: Vec<usize> = g
        .groups
        .iter()
        .map(|grp| argmin_lowest(truth.groups.iter().map(|t| dist(&grp.a, &t.a))))
        .collect();
    let mut first_level = vec![Vec::new(); truth.k1()];
    for (i1, &j1) in group_match.iter().enumerate() {
        first_level[j1].push(i1);
    }
    let second_level = g
        .groups
        .iter()
        .zip(&group_match)
        .map(|(grp, &j1)| {
            let tg = &truth.groups[j1];
            let mut cells = vec![Vec::new(); tg.experts.len()];
            for (i2, e) in grp.experts.iter().enumerate() {
                let j2 = argmin_lowest(tg.experts.iter().map(|t| zeta_dist(e, t)));
                cells[j2].push(i2);
            }
            cells
        })
        .collect();
    Ok(VoronoiAssignment { first_level, group_match, second_level })
}

fn check_cells(g: &MixingMeasure, truth: &MixingMeasure, cells: &VoronoiAssignment) -> Result<()> {
    let ok = cells.group_match.len() == g.k1()
        && cells.first_level.len() == truth.k1()
        && cells.second_level.len() == g.k1()
        && cells.group_match.iter().all(|&j| j < truth.k1())
        && cells
            .second_level
            .iter()
            .zip(&cells.group_match)
            .all(|(c, &j1)| c.len() == truth.groups[j1].experts.len());
    if ok {
        Ok(())
    } else {
        Err(invalid("Voronoi cells were not computed for these measures"))
    }
}

/// Voronoi loss with exponents chosen per over-specified cell size.
pub fn voronoi_loss_by_cell<F>(
    g: &MixingMeasure,
    truth: &MixingMeasure,
    cells: &VoronoiAssignment,
    mut exps_for: F,
) -> Result<f64>
where
    F: FnMut(usize) -> Result<RateExponents>,
{
    check_cells(g, truth, cells)?;
    let mut loss = 0.0;
    for (j1, members) in cells.first_level.iter().enumerate() {
        let mass: f64 = members.iter().map(|&i1| g.groups[i1].b.exp()).sum();
        loss += (mass - truth.groups[j1].b.exp()).abs();
    }
    for (i1, grp) in g.groups.iter().enumerate() {
        let j1 = cells.group_match[i1];
        let tg = &truth.groups[j1];
        let wb = grp.b.exp();
        loss += wb * dist(&grp.a, &tg.a);
        let mut inner = 0.0;
        for (j2, cell) in cells.second_level[i1].iter().enumerate() {
            let t = &tg.experts[j2];
            let m = cell.len();
            let exps = if m > 1 { Some(exps_for(m)?) } else { None };
            let mut mass = 0.0;
            for &i2 in cell {
                let e = &grp.experts[i2];
                let we = e.beta.exp();
                mass += we;
                let d_omega = dist(&e.omega, &t.omega);
                let d_eta = dist(&e.eta, &t.eta);
                let d_tau = (e.tau - t.tau).abs();
                let d_nu = (e.nu - t.nu).abs();
                inner += we
                    * match exps {
                        None => d_omega + d_eta + d_tau + d_nu,
                        Some(r) => d_omega * d_omega + d_eta.powf(r.r1) + d_tau.powf(r.r2) + d_nu.powf(r.r3),
                    };
            }
            inner += (mass - t.beta.exp()).abs();
        }
        loss += wb * inner;
    }
    Ok(loss)
}

/// Voronoi loss `L_(r1, r2, r3)(g, truth)` with the same exponents for every
/// over-specified cell.
pub fn voronoi_loss(
    g: &MixingMeasure,
    truth: &MixingMeasure,
    exps: RateExponents,
    cells: &VoronoiAssignment,
) -> Result<f64> {
    voronoi_loss_by_cell(g, truth, cells, |_| Ok(exps))
}

/// Options for [`loss_for_combo`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboLossOptions {
    /// Order used for cells with four or more fitted atoms, where no
    /// established value exists.
    pub conjectured_r: f64,
    /// Refuse such cells instead of using `conjectured_r`.
    pub strict: bool,
}

impl Default for ComboLossOptions {
    fn default() -> Self {
        ComboLossOptions { conjectured_r: 7.0, strict: false }
    }
}

/// `r(m)`: smallest order at which the polynomial system of the gating
/// combination has no non-trivial solution with `m` unknown components. The
/// three systems share `r(2) = 4` and `r(3) = 6`.
pub fn solvability_order(m: usize, opts: &ComboLossOptions) -> Result<(f64, bool)> {
    match m {
        0 | 1 => Ok((1.0, false)),
        2 => Ok((4.0, false)),
        3 => Ok((6.0, false)),
        _ if opts.strict => Err(HmoeError::UnsupportedCellSize(m)),
        _ => Ok((opts.conjectured_r, true)),
    }
}

/// Exponents of the loss matched to the Hellinger lower bound of `combo`
/// for a cell of `m` fitted atoms.
pub fn combo_exponents(combo: GatingCombo, m: usize, opts: &ComboLossOptions) -> Result<(RateExponents, bool)> {
    let (r, conj) = solvability_order(m, opts)?;
    let exps = match combo {
        GatingCombo::SS | GatingCombo::SL => RateExponents { r1: r / 2.0, r2: r, r3: r / 2.0 },
        GatingCombo::LL => RateExponents { r1: 2.0, r2: r, r3: r / 2.0 },
    };
    Ok((exps, conj))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboLoss {
    pub value: f64,
    /// Sizes of cells whose exponent came from the conjectured order.
    pub conjectural_cells: Vec<usize>,
}

/// The loss appearing in the parameter-rate theorem of `combo`.
pub fn loss_for_combo(
    g: &MixingMeasure,
    truth: &MixingMeasure,
    combo: GatingCombo,
    cells: &VoronoiAssignment,
    opts: &ComboLossOptions,
) -> Result<ComboLoss> {
    let mut conjectural_cells = Vec::new();
    let value = voronoi_loss_by_cell(g, truth, cells, |m| {
        let (e, conj) = combo_exponents(combo, m, opts)?;
        if conj {
            conjectural_cells.push(m);
        }
        Ok(e)
    })?;
    Ok(ComboLoss { value, conjectural_cells })
}

/// Path weights, means and variances of `p(. | x)` for one fixed `x`.
struct Slice {
    log_w: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Slice {
    fn new(g: &MixingMeasure, combo: GatingCombo, x: &[f64]) -> Slice {
        let first = combo.first_level();
        let second = combo.second_level();
        let l1: Vec<f64> = g.groups.iter().map(|grp| first.logit(&grp.a, grp.b, x)).collect();
        let lse1 = log_sum_exp(&l1);
        let mut s = Slice { log_w: vec![], mean: vec![], var: vec![] };
        for (grp, lg1) in g.groups.iter().zip(&l1) {
            let l2: Vec<f64> = grp.experts.iter().map(|e| second.logit(&e.omega, e.beta, x)).collect();
            let lse2 = log_sum_exp(&l2);
            for (e, lg2) in grp.experts.iter().zip(&l2) {
                s.log_w.push(lg1 - lse1 + lg2 - lse2);
                s.mean.push(dot(&e.eta, x) + e.tau);
                s.var.push(e.nu);
            }
        }
        s
    }

    fn pdf(&self, y: f64) -> f64 {
        let mut p = 0.0;
        for k in 0..self.mean.len() {
            p += crate::model::log_normal_pdf(y, self.mean[k], self.var[k]).add(self.log_w[k]).exp();
        }
        p
    }
}

trait Add {
    fn add(self, o: f64) -> f64;
}
impl Add for f64 {
    #[inline]
    fn add(self, o: f64) -> f64 {
        self + o
    }
}

fn y_range(a: &Slice, b: &Slice) -> (f64, f64) {
    let means = a.mean.iter().chain(&b.mean);
    let lo = means.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.cloned().fold(f64::NEG_INFINITY, f64::max);
    let sd = a.var.iter().chain(&b.var).cloned().fold(0.0, f64::max).sqrt();
    (lo - 12.0 * sd, hi + 12.0 * sd)
}

fn check_pair(g1: &MixingMeasure, g2: &MixingMeasure, probes: &[Vec<f64>]) -> Result<()> {
    g1.validate()?;
    g2.validate()?;
    if g1.dim != g2.dim {
        return Err(invalid("measures have different dimensions"));
    }
    if probes.is_empty() {
        return Err(invalid("at least one x probe is required"));
    }
    if probes.iter().any(|p| p.len() != g1.dim || p.iter().any(|v| !v.is_finite())) {
        return Err(invalid("probe has wrong dimension or non-finite entries"));
    }
    Ok(())
}

/// Hellinger distance between `p_g1(. | x)` and `p_g2(. | x)` at one `x`.
pub fn hellinger_at(g1: &MixingMeasure, g2: &MixingMeasure, combo: GatingCombo, x: &[f64], quad: &QuadSpec) -> Result<f64> {
    let a = Slice::new(g1, combo, x);
    let b = Slice::new(g2, combo, x);
    let (lo, hi) = y_range(&a, &b);
    let r = integrate(
        |y| {
            let d = a.pdf(y).sqrt() - b.pdf(y).sqrt();
            0.5 * d * d
        },
        lo,
        hi,
        quad,
    )?;
    Ok(r.value.clamp(0.0, 1.0).sqrt())
}

/// Total-variation distance at one `x`.
pub fn total_variation_at(g1: &MixingMeasure, g2: &MixingMeasure, combo: GatingCombo, x: &[f64], quad: &QuadSpec) -> Result<f64> {
    let a = Slice::new(g1, combo, x);
    let b = Slice::new(g2, combo, x);
    let (lo, hi) = y_range(&a, &b);
    let r = integrate(|y| 0.5 * (a.pdf(y) - b.pdf(y)).abs(), lo, hi, quad)?;
    Ok(r.value.clamp(0.0, 1.0))
}

fn probe_mean<F>(probes: &[Vec<f64>], f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let vals: Vec<Result<f64>> = probes.par_iter().map(|x| f(x)).collect();
    let mut s = 0.0;
    for v in vals {
        s += v?;
    }
    Ok(s / probes.len() as f64)
}

/// Probe average of the Hellinger distance: a deterministic estimate of
/// `E_X[h(p_g1(. | X), p_g2(. | X))]`.
pub fn hellinger(g1: &MixingMeasure, g2: &MixingMeasure, combo: GatingCombo, probes: &[Vec<f64>], quad: &QuadSpec) -> Result<f64> {
    check_pair(g1, g2, probes)?;
    probe_mean(probes, |x| hellinger_at(g1, g2, combo, x, quad))
}

/// Probe average of the total-variation distance.
pub fn total_variation(g1: &MixingMeasure, g2: &MixingMeasure, combo: GatingCombo, probes: &[Vec<f64>], quad: &QuadSpec) -> Result<f64> {
    check_pair(g1, g2, probes)?;
    probe_mean(probes, |x| total_variation_at(g1, g2, combo, x, quad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertError {
    /// `max |eta_hat^T x - eta*^T x|` over matched pairs and probes.
    pub max_abs_error: f64,
    /// `max ||eta_hat - eta*||` over matched pairs.
    pub max_eta_dist: f64,
    /// Same, restricted to cells with more than one fitted expert.
    pub max_eta_dist_overspecified: Option<f64>,
    /// Same, restricted to cells with exactly one fitted expert.
    pub max_eta_dist_exact: Option<f64>,
}

/// Prediction error of the slope part of matched experts.
pub fn expert_error(
    g_hat: &MixingMeasure,
    truth: &MixingMeasure,
    cells: &VoronoiAssignment,
    probes: &[Vec<f64>],
) -> Result<ExpertError> {
    check_cells(g_hat, truth, cells)?;
    let mut out = ExpertError {
        max_abs_error: 0.0,
        max_eta_dist: 0.0,
        max_eta_dist_overspecified: None,
        max_eta_dist_exact: None,
    };
    for (i1, grp) in g_hat.groups.iter().enumerate() {
        let tg = &truth.groups[cells.group_match[i1]];
        for (j2, cell) in cells.second_level[i1].iter().enumerate() {
            for &i2 in cell {
                let diff: Vec<f64> = grp.experts[i2].eta.iter().zip(&tg.experts[j2].eta).map(|(a, b)| a - b).collect();
                let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                out.max_eta_dist = out.max_eta_dist.max(norm);
                let slot = if cell.len() > 1 { &mut out.max_eta_dist_overspecified } else { &mut out.max_eta_dist_exact };
                *slot = Some(slot.unwrap_or(0.0).max(norm));
                for x in probes {
                    out.max_abs_error = out.max_abs_error.max(dot(&diff, x).abs());
                }
            }
        }
    }
    Ok(out)
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub combo: GatingCombo,
    pub value: f64,
    pub probes: usize,
    pub tolerance: f64,
}
