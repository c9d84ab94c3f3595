//! Gauss–Hermite rules against a Gaussian weight and Gauss–Legendre rules on `[−1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Which weights the three-point Gauss–Hermite rule uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureConvention {
    /// Normalized Gauss–Hermite weights (exact up to degree `2S − 1`).
    Exact,
    /// Nodes `0, ±√(3/2)` with weights `1/4, 1/2, 1/4`. Other orders fall back to `Exact`.
    #[default]
    QuarterWeights,
}

/// Nodes `x_k` and weights `w_k` (summing to one) for `E[f(μ + √(2δ)·x)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(τ)]` for `τ ~ N(μ, δ)`.
    pub fn expect(&self, mu: f64, delta: f64, f: impl Fn(f64) -> f64) -> f64 {
        let s = (2.0 * delta).sqrt();
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(mu + s * x)).sum()
    }
}

/// Physicists' Hermite polynomial `H_n(x)`.
fn hermite(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    if n == 0 {
        return h0;
    }
    for k in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Weight of node `x` in the `n`-point rule, normalized by `√π`:
/// `2^(n−1) n! / (n² H_{n−1}(x)²)`.
fn hermite_weight(n: usize, x: f64) -> f64 {
    let fact: f64 = (1..=n).map(|k| k as f64).product();
    2f64.powi(n as i32 - 1) * fact / ((n * n) as f64 * hermite(n - 1, x).powi(2))
}

/// Gauss–Hermite rule of order `s ∈ {1, 3, 5}`.
pub fn gauss_hermite_rule(s: usize, convention: QuadratureConvention) -> Result<QuadratureRule> {
    let nodes: Vec<f64> = match s {
        1 => vec![0.0],
        3 => {
            let a = 1.5f64.sqrt();
            vec![-a, 0.0, a]
        }
        5 => {
            let r = 10f64.sqrt();
            let (a, b) = (((5.0 - r) / 2.0).sqrt(), ((5.0 + r) / 2.0).sqrt());
            vec![-b, -a, 0.0, a, b]
        }
        _ => return Err(domain(format!("unsupported quadrature order {s}; use 1, 3 or 5"))),
    };
    let weights = match (s, convention) {
        (1, _) => vec![1.0],
        (3, QuadratureConvention::QuarterWeights) => vec![0.25, 0.5, 0.25],
        (3, QuadratureConvention::Exact) => vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        _ => {
            let w: Vec<f64> = nodes.iter().map(|&x| hermite_weight(s, x)).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        }
    };
    Ok(QuadratureRule { nodes, weights })
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// `n`-point Gauss–Legendre nodes (ascending) and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_rule_constants() {
        let r = gauss_hermite_rule(3, QuadratureConvention::QuarterWeights).unwrap();
        assert_eq!(r.weights, vec![0.25, 0.5, 0.25]);
        assert_eq!(r.nodes, vec![-(1.5f64.sqrt()), 0.0, 1.5f64.sqrt()]);
    }

    #[test]
    fn exact_rules_integrate_gaussian_moments() {
        let (mu, delta) = (0.3, 0.7);
        for (s, max_deg) in [(1usize, 1u32), (3, 5), (5, 9)] {
            let r = gauss_hermite_rule(s, QuadratureConvention::Exact).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            // Central moments of N(0, δ): 0 for odd orders, δ^(p/2)(p−1)!! for even.
            for p in 0..=max_deg {
                let got = r.expect(mu, delta, |t| (t - mu).powi(p as i32));
                let want = if p % 2 == 1 { 0.0 } else { (1..p).step_by(2).map(|k| k as f64).product::<f64>() * delta.powi(p as i32 / 2) };
                assert!((got - want).abs() < 1e-12, "S={s} p={p}: {got} vs {want}");
            }
        }
        assert!(gauss_hermite_rule(4, QuadratureConvention::Exact).is_err());
    }

    #[test]
    fn five_point_weights() {
        let r = gauss_hermite_rule(5, QuadratureConvention::QuarterWeights).unwrap();
        assert!((r.weights[2] - 8.0 / 15.0).abs() < 1e-14);
        assert!((r.nodes[4] - 2.020_182_870_456_086).abs() < 1e-14);
    }

    #[test]
    fn legendre_exactness() {
        let (x, w) = gauss_legendre(7);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        for p in 0..14 {
            let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let want = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((got - want).abs() < 1e-14, "degree {p}");
        }
    }
}
