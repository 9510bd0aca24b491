//! Datasets, input laws and ancestral sampling.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erf_inv};

use crate::error::{invalid, HmoeError, Result};
use crate::model::{softmax_unchecked, GatingCombo, MeasureFile, MixingMeasure};
use crate::rng;

/// Distribution of the inputs `x`. Both laws live on the box `[-h, h]^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLaw {
    UniformBox { half_width: f64 },
    /// Standard normal conditioned on the box.
    TruncatedNormal { half_width: f64 },
}

impl Default for InputLaw {
    fn default() -> Self {
        InputLaw::UniformBox { half_width: 1.0 }
    }
}

impl InputLaw {
    pub fn half_width(&self) -> f64 {
        match *self {
            InputLaw::UniformBox { half_width } | InputLaw::TruncatedNormal { half_width } => half_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.half_width();
        if !(h.is_finite() && h > 0.0) {
            return Err(invalid("input box half-width must be positive and finite"));
        }
        Ok(())
    }

    /// Maps a point of the unit cube onto the law (coordinate-wise inverse CDF).
    pub fn from_unit(&self, u: f64) -> f64 {
        match *self {
            InputLaw::UniformBox { half_width } => -half_width + 2.0 * half_width * u,
            InputLaw::TruncatedNormal { half_width } => {
                let lo = std_normal_cdf(-half_width);
                let hi = std_normal_cdf(half_width);
                let p = (lo + u * (hi - lo)).clamp(1e-300, 1.0 - 1e-16);
                (std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0)).clamp(-half_width, half_width)
            }
        }
    }

    pub fn draw(&self, rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.from_unit(rng.random::<f64>())).collect()
    }

    /// `count` deterministic quasi-random points (Halton sequence, first
    /// point skipped) pushed through the law.
    pub fn probes(&self, dim: usize, count: usize) -> Vec<Vec<f64>> {
        (1..=count)
            .map(|i| (0..dim).map(|k| self.from_unit(halton(i as u64, PRIMES[k % PRIMES.len()]))).collect())
            .collect()
    }
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Generating truth attached to a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub combo: GatingCombo,
    pub measure: MixingMeasure,
}

/// `n` pairs `(x, y)` with `x` stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
    pub input_law: Option<InputLaw>,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dataset dimension must be at least 1"));
        }
        if y.is_empty() {
            return Err(invalid("dataset must contain at least one row"));
        }
        if x.len() != dim * y.len() {
            return Err(invalid(format!("x has {} entries, expected {}", x.len(), dim * y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { dim, x, y, seed: 0, input_law: None, truth: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    /// Checks every row against the input box of `law`.
    pub fn check_box(&self, law: &InputLaw) -> Result<()> {
        let h = law.half_width();
        if self.x.iter().any(|v| v.abs() > h) {
            return Err(invalid(format!("inputs leave the box [-{h}, {h}]^d")));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x_{k}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| fmt_f64(*v)).collect();
            rec.push(fmt_f64(self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 2 || header.get(cols - 1) != Some("y") {
            return Err(invalid("CSV header must be x_0..x_{d-1},y"));
        }
        for (k, h) in header.iter().take(cols - 1).enumerate() {
            if h != format!("x_{k}") {
                return Err(invalid(format!("unexpected CSV column {h:?}")));
            }
        }
        let dim = cols - 1;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| invalid(format!("row {}: cannot parse {field:?}", line + 2)))?;
                if k < dim {
                    x.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        Dataset::new(dim, x, y)
    }

    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            n: self.len(),
            dim: self.dim,
            seed: self.seed,
            input_law: self.input_law,
            truth: self.truth.as_ref().map(|t| MeasureFile { combo: t.combo, measure: t.measure.clone() }),
        }
    }

    pub fn apply_sidecar(&mut self, side: DatasetSidecar) -> Result<()> {
        if side.n != self.len() || side.dim != self.dim {
            return Err(invalid("sidecar shape does not match CSV"));
        }
        self.seed = side.seed;
        self.input_law = side.input_law;
        self.truth = side.truth.map(|f| Truth { combo: f.combo, measure: f.measure });
        Ok(())
    }

    /// Reads `path` and, if present, the JSON sidecar next to it
    /// (same stem, `.json` extension).
    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Dataset::read_csv(path)?;
        let side = path.with_extension("json");
        if side.exists() {
            let s: DatasetSidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
            data.apply_sidecar(s)?;
        }
        Ok(data)
    }
}

/// JSON metadata stored next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub input_law: Option<InputLaw>,
    pub truth: Option<MeasureFile>,
}

/// Shortest round-trip representation, so CSV output is stable.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Ancestral sampling: `x` from the input law, the group from the first-level
/// gate, the expert from the second-level gate, then `y` from the expert's
/// Gaussian.
pub fn sample(
    measure: &MixingMeasure,
    combo: GatingCombo,
    n: usize,
    law: InputLaw,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    measure.validate()?;
    law.validate()?;
    let d = measure.dim;
    let mut rng = rng::stream(seed, 0);
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    let first = combo.first_level();
    let second = combo.second_level();
    for _ in 0..n {
        let x = law.draw(&mut rng, d);
        let l1: Vec<f64> = measure.groups.iter().map(|g| first.logit(&g.a, g.b, &x)).collect();
        let i1 = categorical(&softmax_unchecked(&l1), rng.random::<f64>());
        let group = &measure.groups[i1];
        let l2: Vec<f64> = group.experts.iter().map(|e| second.logit(&e.omega, e.beta, &x)).collect();
        let i2 = categorical(&softmax_unchecked(&l2), rng.random::<f64>());
        let e = &group.experts[i2];
        let z: f64 = StandardNormal.sample(&mut rng);
        ys.push(e.mean(&x) + e.nu.sqrt() * z);
        xs.extend_from_slice(&x);
    }
    let mut data = Dataset::new(d, xs, ys).map_err(|e| match e {
        HmoeError::InvalidInput(m) => HmoeError::InvalidModel(format!("sampling produced invalid data: {m}")),
        other => other,
    })?;
    data.seed = seed;
    data.input_law = Some(law);
    data.truth = Some(Truth { combo, measure: measure.clone() });
    Ok(data)
}

fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpertAtom, GroupAtom, Level};

    fn line_model() -> MixingMeasure {
        MixingMeasure::new(
            1,
            vec![GroupAtom {
                a: vec![0.0],
                b: 0.0,
                experts: vec![ExpertAtom { omega: vec![0.0], beta: 0.0, eta: vec![2.0], tau: 1.0, nu: 0.01 }],
            }],
        )
        .unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = line_model();
        let a = sample(&g, GatingCombo::SS, 100, InputLaw::default(), 11).unwrap();
        let b = sample(&g, GatingCombo::SS, 100, InputLaw::default(), 11).unwrap();
        let c = sample(&g, GatingCombo::SS, 100, InputLaw::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.y, c.y);
        a.check_box(&InputLaw::default()).unwrap();
    }

    #[test]
    fn residual_mean_matches_clt_bound() {
        // sd(y - 2x - 1) = 0.1, so the mean of 1e5 residuals has sd 3.2e-4;
        // 0.005 is more than 15 standard errors.
        let g = line_model();
        let d = sample(&g, GatingCombo::SS, 100_000, InputLaw::default(), 3).unwrap();
        let mean: f64 =
            (0..d.len()).map(|i| d.y[i] - 2.0 * d.row(i)[0] - 1.0).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.005, "mean residual {mean}");
    }

    #[test]
    fn truncated_normal_stays_in_box() {
        let law = InputLaw::TruncatedNormal { half_width: 0.5 };
        let g = line_model();
        let d = sample(&g, GatingCombo::SS, 2000, law, 1).unwrap();
        d.check_box(&law).unwrap();
        for p in law.probes(2, 64) {
            assert!(p.iter().all(|v| v.abs() <= 0.5));
        }
    }

    #[test]
    fn branch_frequencies_match_gates() {
        // Two groups, two experts each; experts are made identifiable from y
        // by giving them far-apart intercepts and tiny variances.
        let mk = |tau: f64, omega: f64| ExpertAtom { omega: vec![omega], beta: 0.0, eta: vec![0.0], tau, nu: 1e-6 };
        let g = MixingMeasure::new(
            1,
            vec![
                GroupAtom { a: vec![1.5], b: 0.3, experts: vec![mk(0.0, 1.0), mk(10.0, 0.0)] },
                GroupAtom { a: vec![0.0], b: 0.0, experts: vec![mk(20.0, -1.0), mk(30.0, 0.0)] },
            ],
        )
        .unwrap();
        let law = InputLaw::UniformBox { half_width: 1e-9 };
        for combo in GatingCombo::ALL {
            let n = 100_000;
            let d = sample(&g, combo, n, law, 5).unwrap();
            let x = [0.0];
            let g1 = g.gate_weights(combo, &x, Level::First).unwrap();
            let mut probs = Vec::new();
            for (i1, w1) in g1.iter().enumerate() {
                let g2 = g.gate_weights(combo, &x, Level::Second(i1)).unwrap();
                probs.extend(g2.iter().map(|w2| w1 * w2));
            }
            let mut counts = [0usize; 4];
            for y in &d.y {
                counts[((y / 10.0).round() as usize).min(3)] += 1;
            }
            for (c, p) in counts.iter().zip(&probs) {
                let sd = (p * (1.0 - p) / n as f64).sqrt();
                let f = *c as f64 / n as f64;
                assert!((f - p).abs() <= 3.0 * sd + 1e-12, "{combo}: freq {f} vs {p}");
            }
        }
    }

    #[test]
    fn csv_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let g = line_model();
        let d = sample(&g, GatingCombo::LL, 50, InputLaw::default(), 9).unwrap();
        let path = dir.path().join("data.csv");
        d.write_csv(&path).unwrap();
        fs::write(path.with_extension("json"), serde_json::to_string(&d.sidecar()).unwrap()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, d);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x_0,y\n"));
    }

    #[test]
    fn halton_points_fill_unit_interval() {
        let p = InputLaw::UniformBox { half_width: 1.0 }.probes(1, 512);
        let mean: f64 = p.iter().map(|v| v[0]).sum::<f64>() / 512.0;
        assert!(mean.abs() < 0.01);
        assert_eq!(p[0], vec![0.0]);
    }
}
