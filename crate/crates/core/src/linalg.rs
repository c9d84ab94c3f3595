//! Small dense Hermitian solves and the separable atom set used in the hot loops.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::exp_ramp;

/// Reciprocal-condition proxy below which a Gram matrix counts as near-singular.
const NEAR_SINGULAR: f64 = 1e-13;
/// Ridge added to near-singular Gram matrices, relative to the mean diagonal.
pub const RIDGE_JITTER_REL: f64 = 1e-12;

/// Outcome of a Hermitian positive (semi)definite solve.
#[derive(Debug, Clone)]
pub struct HermitianSolve {
    pub x: DVector<Complex64>,
    /// Ridge actually added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

/// Solve `G x = b` for Hermitian PSD `G` via Cholesky, adding a small ridge when `G`
/// is numerically singular. Never fails for finite inputs.
pub fn solve_hermitian(g: &DMatrix<Complex64>, b: &DVector<Complex64>) -> HermitianSolve {
    let n = g.nrows();
    if n == 0 {
        return HermitianSolve { x: DVector::zeros(0), jitter: 0.0 };
    }
    let mean_diag = (0..n).map(|i| g[(i, i)].re.abs()).sum::<f64>() / n as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 0.0;
    loop {
        let mut gj = g.clone();
        for i in 0..n {
            gj[(i, i)] += Complex64::new(jitter, 0.0);
        }
        if let Some(ch) = gj.cholesky() {
            let l = ch.l_dirty();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in 0..n {
                let d = l[(i, i)].re * l[(i, i)].re;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if lo > NEAR_SINGULAR * hi || jitter > 0.0 && lo > 0.0 {
                return HermitianSolve { x: ch.solve(b), jitter };
            }
        }
        jitter = if jitter == 0.0 { RIDGE_JITTER_REL * base } else { jitter * 100.0 };
    }
}

/// Delay/angle atoms kept in factored form: `a_i = f_i ⊗ s_i`.
///
/// Parameters are in normalized units `u = τ/Δτ`, `v = θ/Δθ`, so the frequency
/// factor has entries `exp(-j2π u k / M)` and the steering factor `exp(-j2π v a / N)`.
#[derive(Debug, Clone)]
pub(crate) struct AtomSet {
    pub m: usize,
    pub n: usize,
    pub freq: Vec<Vec<Complex64>>,
    pub steer: Vec<Vec<Complex64>>,
}

impl AtomSet {
    pub fn from_normalized(us: &[f64], vs: &[f64], m: usize, n: usize) -> Self {
        let freq = us.iter().map(|&u| exp_ramp(u / m as f64, 0, m)).collect();
        let steer = vs.iter().map(|&v| exp_ramp(v / n as f64, 0, n)).collect();
        Self { m, n, freq, steer }
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    /// `AᴴA` from the separable inner products.
    pub fn gram(&self) -> DMatrix<Complex64> {
        let k = self.len();
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                return Complex64::new((self.m * self.n) as f64, 0.0);
            }
            let f: Complex64 = self.freq[i].iter().zip(&self.freq[j]).map(|(a, b)| a.conj() * b).sum();
            let s: Complex64 = self.steer[i].iter().zip(&self.steer[j]).map(|(a, b)| a.conj() * b).sum();
            f * s
        })
    }

    /// `w_k = Σ_a conj(s_a) x[k, a]` for one atom's steering factor.
    fn steer_reduce(&self, i: usize, x: &[Complex64]) -> Vec<Complex64> {
        let s = &self.steer[i];
        x.chunks_exact(self.n)
            .map(|row| row.iter().zip(s).map(|(v, sa)| sa.conj() * v).sum())
            .collect()
    }

    /// `Aᴴ x`.
    pub fn adjoint_apply(&self, x: &[Complex64]) -> DVector<Complex64> {
        DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|i| {
                let w = self.steer_reduce(i, x);
                self.freq[i].iter().zip(&w).map(|(f, w)| f.conj() * w).sum()
            }),
        )
    }

    /// `A β`.
    pub fn apply(&self, beta: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.m * self.n];
        for (i, &b) in beta.iter().enumerate() {
            let s = &self.steer[i];
            for (k, &f) in self.freq[i].iter().enumerate() {
                let fb = f * b;
                for (o, &sa) in out[k * self.n..(k + 1) * self.n].iter_mut().zip(s) {
                    *o += fb * sa;
                }
            }
        }
        out
    }

    /// Per-atom `(∂_u a_i)ᴴ x` and `(∂_v a_i)ᴴ x` in normalized units.
    pub fn derivative_adjoints(&self, x: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let jm = Complex64::new(0.0, 2.0 * PI / self.m as f64);
        let jn = Complex64::new(0.0, 2.0 * PI / self.n as f64);
        let mut du = Vec::with_capacity(self.len());
        let mut dv = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let w = self.steer_reduce(i, x);
            let f = &self.freq[i];
            let gu: Complex64 = f.iter().zip(&w).enumerate().map(|(k, (f, w))| f.conj() * w * k as f64).sum();
            du.push(jm * gu);
            let s = &self.steer[i];
            let mut gv = Complex64::new(0.0, 0.0);
            for (k, row) in x.chunks_exact(self.n).enumerate() {
                let inner: Complex64 = row.iter().zip(s).enumerate().map(|(a, (v, sa))| sa.conj() * v * a as f64).sum();
                gv += f[k].conj() * inner;
            }
            dv.push(jn * gv);
        }
        (du, dv)
    }
}
