//! Small dense linear algebra on top of nalgebra: matrix exponential,
//! symmetric square roots, PSD factorization, and Gauss-Legendre quadrature
//! for matrix-valued integrands.

use alloc::vec::Vec;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// nalgebra only provides `exp` with its `std` feature, so the core crate
/// carries its own. After scaling the 1-norm is at most 1/2, where 20 Taylor
/// terms are far below double-precision roundoff.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * scale;
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

pub fn symmetric_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn skew_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a - a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetric_part(a));
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Unique symmetric PSD square root. Eigenvalues below zero (roundoff) are clamped.
pub fn symmetric_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetric_part(a));
    let roots = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&roots) * v.transpose()
}

/// Factor a symmetric PSD matrix as `L Lᵀ`.
///
/// Cholesky first; for singular or roundoff-indefinite input falls back to
/// `V sqrt(Λ₊)` from the eigendecomposition. Eigenvalues below `-1e-10`
/// are reported as an error.
pub fn psd_factor(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = symmetric_part(q);
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(Error::Factorization { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    libm::sqrt(a.iter().map(|x| x * x).sum::<f64>())
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut nodes = alloc::vec![0.0; order];
        let mut weights = alloc::vec![0.0; order];
        let m = order.div_ceil(2);
        let nf = order as f64;
        for i in 0..m {
            // Newton iteration on P_n from the Chebyshev-like initial guess.
            let mut x = libm::cos(core::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5));
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=order {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                let pn = if order == 1 { x } else { p1 };
                let pn_1 = if order == 1 { 1.0 } else { p0 };
                dp = nf * (x * pn - pn_1) / (x * x - 1.0);
                let dx = pn / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        if order % 2 == 1 {
            nodes[order / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Composite rule with `panels` equal panels on `[a, b]`.
    pub fn composite<F>(&self, a: f64, b: f64, panels: usize, rows: usize, cols: usize, f: &mut F) -> DMatrix<f64>
    where
        F: FnMut(f64) -> DMatrix<f64>,
    {
        let mut acc = DMatrix::zeros(rows, cols);
        let width = (b - a) / panels as f64;
        for p in 0..panels {
            let lo = a + p as f64 * width;
            let mid = lo + 0.5 * width;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                acc += f(mid + 0.5 * width * x) * (0.5 * width * w);
            }
        }
        acc
    }
}

/// Integrate a matrix-valued function over `[a, b]` with a 10-point composite
/// Gauss-Legendre rule, doubling the panel count until successive estimates
/// agree to `tol` (max-abs).
pub fn integrate_matrix<F>(a: f64, b: f64, rows: usize, cols: usize, tol: f64, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(f64) -> DMatrix<f64>,
{
    if b <= a {
        return Ok(DMatrix::zeros(rows, cols));
    }
    let rule = GaussLegendre::new(10);
    let mut panels = (libm::ceil(b - a) as usize).max(1);
    let mut previous = rule.composite(a, b, panels, rows, cols, &mut f);
    let mut change = f64::INFINITY;
    for _ in 0..12 {
        panels *= 2;
        let current = rule.composite(a, b, panels, rows, cols, &mut f);
        change = max_abs(&(&current - &previous));
        if change <= tol {
            return Ok(current);
        }
        previous = current;
    }
    Err(Error::Quadrature { tolerance: tol, achieved: change })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(5);
        // exact for degree <= 9
        let integral: f64 = rule.nodes().iter().zip(rule.weights()).map(|(x, w)| w * x.powi(8)).sum();
        assert_abs_diff_eq!(integral, 2.0 / 9.0, epsilon = 1e-14);
        let total: f64 = rule.weights().iter().sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn integrate_matrix_exponential_decay() {
        let m = integrate_matrix(-30.0, 0.0, 1, 1, 1e-12, |y| DMatrix::from_element(1, 1, 2.0 * libm::exp(2.0 * y))).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 1.0 - libm::exp(-60.0), epsilon = 1e-12);
    }

    #[test]
    fn symmetric_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let s = symmetric_sqrt(&a);
        assert!(max_abs(&(&s * &s - &a)) < 1e-13);
        assert!(max_abs(&(&s - s.transpose())) < 1e-14);
    }

    #[test]
    fn psd_factor_handles_singular_input() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&a).unwrap();
        assert!(max_abs(&(&l * l.transpose() - &a)) < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(psd_factor(&bad), Err(Error::Factorization { .. })));
    }

    #[test]
    fn expm_of_rotation_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = expm(&a);
        assert_abs_diff_eq!(e[(0, 0)], libm::cos(1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(e[(1, 0)], libm::sin(1.0), epsilon = 1e-14);
        let big = expm(&(a * 40.0));
        assert_abs_diff_eq!(big[(0, 0)], libm::cos(40.0), epsilon = 1e-12);
        assert_abs_diff_eq!(big[(0, 1)], -libm::sin(40.0), epsilon = 1e-12);
    }

    #[test]
    fn expm_of_diagonal_and_nilpotent() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(alloc::vec![-3.0, 0.5, 7.0]));
        let e = expm(&d);
        for (i, v) in [-3.0f64, 0.5, 7.0].iter().enumerate() {
            assert!((e[(i, i)] / v.exp() - 1.0).abs() < 1e-14);
        }
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 2.5, 0.0, 0.0]);
        let e = expm(&nil);
        assert_eq!(e[(0, 1)], 2.5);
        assert_eq!(e[(0, 0)], 1.0);
    }
}
