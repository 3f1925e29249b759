//! Small dense complex linear algebra on `ndarray` matrices.
//!
//! Factorizations are delegated to `nalgebra`; the per-frequency systems
//! here are at most a few dozen rows, so the copies in and out are cheap.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::C64;

/// Pivots smaller than this fraction of the largest pivot count as zero.
const PIVOT_RTOL: f64 = 1e-14;

fn to_na(a: ArrayView2<'_, C64>) -> DMatrix<C64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Conjugate transpose.
pub fn adjoint(a: ArrayView2<'_, C64>) -> Array2<C64> {
    a.t().mapv(|v| v.conj())
}

/// `trace(a)`, real part.
pub fn trace_re(a: ArrayView2<'_, C64>) -> f64 {
    a.diag().iter().map(|v| v.re).sum()
}

/// Adds `amount` to every diagonal entry.
pub fn load_diagonal(a: &mut Array2<C64>, amount: f64) {
    for v in a.diag_mut() {
        v.re += amount;
    }
}

/// Solves `a x = b` for Hermitian positive definite `a` by Cholesky.
/// Returns `None` when `a` is not numerically positive definite.
pub fn hermitian_solve(a: ArrayView2<'_, C64>, b: ArrayView2<'_, C64>) -> Option<Array2<C64>> {
    let chol = nalgebra::linalg::Cholesky::new(to_na(a))?;
    let x = chol.solve(&to_na(b));
    x.iter().all(|v| v.is_finite()).then(|| from_na(&x))
}

fn checked_lu(a: ArrayView2<'_, C64>) -> Option<nalgebra::linalg::LU<C64, nalgebra::Dyn, nalgebra::Dyn>> {
    assert_eq!(a.nrows(), a.ncols(), "square matrix required");
    let lu = to_na(a).lu();
    let u = lu.u();
    let pivots: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].norm()).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) || pivots.iter().any(|&p| p <= max * PIVOT_RTOL) {
        return None;
    }
    Some(lu)
}

/// Solves the general square system `a x = b` by partially pivoted LU.
pub fn solve(a: ArrayView2<'_, C64>, b: ArrayView2<'_, C64>) -> Option<Array2<C64>> {
    let x = checked_lu(a)?.solve(&to_na(b))?;
    x.iter().all(|v| v.is_finite()).then(|| from_na(&x))
}

/// Matrix inverse, `None` if singular.
pub fn inverse(a: ArrayView2<'_, C64>) -> Option<Array2<C64>> {
    let inv = checked_lu(a)?.try_inverse()?;
    Some(from_na(&inv))
}

/// Determinant by LU (no singularity threshold).
pub fn det(a: ArrayView2<'_, C64>) -> C64 {
    to_na(a).lu().determinant()
}

/// `log |det a|`, computed from the LU pivots to avoid overflow.
pub fn log_abs_det(a: ArrayView2<'_, C64>) -> f64 {
    let lu = to_na(a).lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].norm().ln()).sum()
}

/// Frobenius norm.
pub fn fro_norm(a: ArrayView2<'_, C64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn hermitian_solve_matches_known_solution() {
        let a = array![[c(4.0, 0.0), c(1.0, 1.0)], [c(1.0, -1.0), c(3.0, 0.0)]];
        let x = array![[c(1.0, 2.0)], [c(-1.0, 0.5)]];
        let b = a.dot(&x);
        let got = hermitian_solve(a.view(), b.view()).unwrap();
        assert!(fro_norm((&got - &x).view()) < 1e-12);
    }

    #[test]
    fn singular_matrices_are_rejected() {
        let a = array![[c(1.0, 0.0), c(2.0, 0.0)], [c(2.0, 0.0), c(4.0, 0.0)]];
        let b = array![[c(1.0, 0.0)], [c(0.0, 0.0)]];
        assert!(solve(a.view(), b.view()).is_none());
        assert!(inverse(a.view()).is_none());
        assert!(hermitian_solve(a.view(), b.view()).is_none());
    }

    #[test]
    fn log_abs_det_of_diagonal() {
        let a = array![[c(2.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, 3.0)]];
        assert!((log_abs_det(a.view()) - 6f64.ln()).abs() < 1e-14);
        assert!((det(a.view()) - c(0.0, 6.0)).norm() < 1e-14);
    }
}
