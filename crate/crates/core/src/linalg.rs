//! Small dense solves on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Ridge added to normal equations that are not positive definite.
pub const RIDGE: f64 = 1e-8;

/// Solves `a x = b` for symmetric positive semi-definite `a`. Falls back to
/// `(a + RIDGE I) x = b` when the Cholesky factorization fails. Returns
/// `None` only if the ridged system is still singular.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let n = a.nrows();
    let ridged = a + DMatrix::<f64>::identity(n, n) * RIDGE;
    ridged
        .cholesky()
        .map(|ch| ch.solve(b))
        .or_else(|| (a + DMatrix::<f64>::identity(n, n) * RIDGE).lu().solve(b))
}

/// Solves `(JᵀJ + λ I) δ = -Jᵀ r`, the damped Gauss–Newton step.
pub fn damped_gauss_newton_step(j: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = j.ncols();
    let jt = j.transpose();
    let a = &jt * j + DMatrix::<f64>::identity(n, n) * lambda;
    let g = -(&jt * r);
    a.cholesky().map(|ch| ch.solve(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_and_ridge_fallback() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() < 1e-14);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let x = solve_spd(&singular, &DVector::from_vec(vec![2.0, 2.0])).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        assert!((x[0] + x[1] - 2.0).abs() < 1e-6);
    }
}
