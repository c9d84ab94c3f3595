//! Discrete prolate spheroidal sequences for the uniform-delay-prior kernel.
//!
//! `T(c) = (c/m)·Toeplitz(sinc(π k c / m))` is the prolate matrix with half-bandwidth
//! `W = c/(2m)`. Eigenvectors come from the commuting symmetric tridiagonal matrix,
//! whose spectrum is well separated; eigenvalues are then evaluated as the in-band
//! energy `∫_{−W}^{W} |V(f)|² df` of each sequence by Gauss–Legendre quadrature, which
//! keeps even the exponentially small tail eigenvalues strictly positive.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use super::quadrature::gauss_legendre;
use crate::error::{domain, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dpss {
    /// Descending concentration eigenvalues, each in `(0, 1)`, summing to `c`.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal sequences as columns in eigenvalue order, signed so that the
    /// largest-magnitude entry is positive.
    pub eigenvectors: DMatrix<f64>,
}

/// The kernel `T(c)` itself.
pub fn dpss_kernel(m: usize, c: f64) -> DMatrix<f64> {
    let u = |k: usize| {
        if k == 0 {
            1.0
        } else {
            let x = PI * k as f64 * c / m as f64;
            x.sin() / x
        }
    };
    DMatrix::from_fn(m, m, |i, j| c / m as f64 * u(i.abs_diff(j)))
}

pub fn dpss_toeplitz(m: usize, c: f64) -> Result<Dpss> {
    if m == 0 || !(c > 0.0 && c < m as f64) {
        return Err(domain(format!("DPSS needs 0 < c < m, got c = {c}, m = {m}")));
    }
    let w = c / (2.0 * m as f64);
    let half = (m as f64 - 1.0) / 2.0;
    let cos2w = (2.0 * PI * w).cos();
    let tri = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            (half - i as f64).powi(2) * cos2w
        } else if i.abs_diff(j) == 1 {
            let k = i.max(j) as f64;
            k * (m as f64 - k) / 2.0
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(tri);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let q = (8.0 * c).ceil() as usize + 48;
    let (gx, gw) = gauss_legendre(q);
    let mut vectors = DMatrix::zeros(m, m);
    let mut values = Vec::with_capacity(m);
    for (col, &idx) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        // f = W·x maps the Legendre nodes onto [−W, W].
        let mut lambda = 0.0;
        for (x, wq) in gx.iter().zip(&gw) {
            let f = w * x;
            let (mut re, mut im) = (0.0, 0.0);
            for (k, vk) in v.iter().enumerate() {
                let ph = 2.0 * PI * f * k as f64;
                re += vk * ph.cos();
                im -= vk * ph.sin();
            }
            lambda += wq * w * (re * re + im * im);
        }
        // Rounding can push concentrations of order one just past 1.
        values.push(lambda.min(1.0 - f64::EPSILON / 2.0));
        vectors.set_column(col, &v);
    }
    Ok(Dpss { eigenvalues: values, eigenvectors: vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_dense_eigensolver() {
        let d = dpss_toeplitz(16, 4.0).unwrap();
        let mut dense: Vec<f64> = SymmetricEigen::new(dpss_kernel(16, 4.0)).eigenvalues.iter().copied().collect();
        dense.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in d.eigenvalues.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn trace_and_range() {
        let d = dpss_toeplitz(8, 0.5).unwrap();
        assert!((d.eigenvalues.iter().sum::<f64>() - 0.5).abs() < 1e-12);
        assert!(d.eigenvalues.iter().all(|&l| l > 0.0 && l < 1.0));
        assert!(dpss_toeplitz(8, 8.0).is_err());
    }
}
