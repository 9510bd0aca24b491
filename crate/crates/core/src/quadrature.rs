//! Globally adaptive Gauss–Kronrod (G7/K15) quadrature on a finite interval.

use crate::error::{HmoeError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
// Gauss weights for nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadSpec {
    pub abs_tol: f64,
    pub max_intervals: usize,
    /// Initial number of equal sub-intervals.
    pub initial_pieces: usize,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec { abs_tol: 1e-9, max_intervals: 4000, initial_pieces: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Integrates `f` over `[a, b]`, bisecting the piece with the largest error
/// estimate until the summed error is below `spec.abs_tol`.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, spec: &QuadSpec) -> Result<QuadResult> {
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(HmoeError::InvalidInput(format!("bad integration interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(QuadResult { value: 0.0, error: 0.0, intervals: 0 });
    }
    let pieces = spec.initial_pieces.max(1);
    let w = (b - a) / pieces as f64;
    let mut list: Vec<Piece> = (0..pieces)
        .map(|k| {
            let lo = a + k as f64 * w;
            let hi = if k + 1 == pieces { b } else { lo + w };
            let (value, error) = gk15(&mut f, lo, hi);
            Piece { a: lo, b: hi, value, error }
        })
        .collect();
    loop {
        let err: f64 = list.iter().map(|p| p.error).sum();
        let value: f64 = list.iter().map(|p| p.value).sum();
        if !value.is_finite() {
            return Err(HmoeError::InvalidInput("integrand is not finite".into()));
        }
        if err <= spec.abs_tol {
            return Ok(QuadResult { value, error: err, intervals: list.len() });
        }
        if list.len() >= spec.max_intervals {
            return Err(HmoeError::QuadratureError { achieved: err, tolerance: spec.abs_tol });
        }
        let (worst, _) = list
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("non-empty");
        let p = list.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if mid <= p.a || mid >= p.b {
            return Err(HmoeError::QuadratureError { achieved: err, tolerance: spec.abs_tol });
        }
        let (v1, e1) = gk15(&mut f, p.a, mid);
        let (v2, e2) = gk15(&mut f, mid, p.b);
        list.push(Piece { a: p.a, b: mid, value: v1, error: e1 });
        list.push(Piece { a: mid, b: p.b, value: v2, error: e2 });
    }
}
