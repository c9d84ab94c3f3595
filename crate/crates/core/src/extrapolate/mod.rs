//! Gaussian delay posteriors, linear optimal extrapolation (LOX) by Gauss–Hermite
//! quadrature, and its low-rank projections.
//!
//! The covariance of a path's frequency response under a Gaussian delay posterior is
//! approximated by a weighted sum of atoms at quadrature delays, `B₀DB₀ᴴ`. The LMMSE
//! extrapolator is then `B_e(B₀ᴴB₀ + σ²D⁻¹)⁻¹B₀ᴴh′`, with all inversions in the small
//! `S·N_p` dimension.

mod dpss;
mod quadrature;

pub use dpss::{dpss_kernel, dpss_toeplitz, Dpss};
pub use quadrature::{gauss_hermite_rule, gauss_legendre, QuadratureConvention, QuadratureRule};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{build_freq_atom, build_steering_atom, kron, Band, ChannelConfig, Observation};
use crate::error::{domain, Result};
use crate::linalg::solve_hermitian;
use crate::qnomp::EstimationResult;

/// How a posterior variance is read from the inverse-Hessian diagonal `hᵢᵢ`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceReading {
    /// `δᵢ = hᵢᵢ`.
    #[default]
    InverseHessian,
    /// `δᵢ = 1/hᵢᵢ`.
    Reciprocal,
}

/// Independent Gaussian delay posteriors `N(τᵢ, δᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayPosterior {
    pub map_taus: Vec<f64>,
    /// Variances in seconds², clipped to `(Δτ/2)²`.
    pub variances: Vec<f64>,
    /// False when no curvature information was available and all variances are zero.
    pub from_hessian: bool,
}

impl DelayPosterior {
    /// Point-mass posterior at `taus`.
    pub fn delta(taus: &[f64]) -> Self {
        Self { map_taus: taus.to_vec(), variances: vec![0.0; taus.len()], from_hessian: false }
    }
}

pub fn posterior_from_bfgs(result: &EstimationResult, cfg: &ChannelConfig) -> DelayPosterior {
    posterior_from_bfgs_with(result, cfg, VarianceReading::default())
}

pub fn posterior_from_bfgs_with(result: &EstimationResult, cfg: &ChannelConfig, reading: VarianceReading) -> DelayPosterior {
    let taus = &result.paths.taus;
    let Some(diag) = result.delay_inv_hessian_diag.as_ref().filter(|d| d.len() == taus.len()) else {
        return DelayPosterior::delta(taus);
    };
    let dt = cfg.delay_step();
    let cap = 0.25 * dt * dt;
    let variances = diag
        .iter()
        .map(|&h| {
            let v = match reading {
                VarianceReading::InverseHessian => h,
                VarianceReading::Reciprocal => 1.0 / h,
            } * dt
                * dt;
            if v.is_finite() {
                v.clamp(0.0, cap)
            } else {
                cap
            }
        })
        .collect();
    DelayPosterior { map_taus: taus.clone(), variances, from_hessian: true }
}

/// Settings for the LOX estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoxConfig {
    pub order: usize,
    pub convention: QuadratureConvention,
    pub reading: VarianceReading,
}

impl Default for LoxConfig {
    fn default() -> Self {
        Self { order: 3, convention: QuadratureConvention::QuarterWeights, reading: VarianceReading::InverseHessian }
    }
}

impl LoxConfig {
    pub fn rule(&self) -> Result<QuadratureRule> {
        gauss_hermite_rule(self.order, self.convention)
    }
}

/// Quadrature dictionaries and prior weights: `Cov(h′) ≈ B₀DB₀ᴴ`, `Cov(h_e, h′) ≈ B_eDB₀ᴴ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoxOperator {
    pub b0: DMatrix<Complex64>,
    pub be: DMatrix<Complex64>,
    pub d: Vec<f64>,
}

impl LoxOperator {
    pub fn new(b0: DMatrix<Complex64>, be: DMatrix<Complex64>, d: Vec<f64>) -> Result<Self> {
        if b0.ncols() != d.len() || be.ncols() != d.len() {
            return Err(domain("LOX dictionaries and weights disagree in column count"));
        }
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(domain("LOX prior weights must be positive"));
        }
        Ok(Self { b0, be, d })
    }

    /// Same pilot dictionary used as the target, for denoising the observed band.
    pub fn pilot(&self) -> Self {
        Self { b0: self.b0.clone(), be: self.b0.clone(), d: self.d.clone() }
    }

    pub fn ncols(&self) -> usize {
        self.d.len()
    }

    /// `B₀DB₀ᴴ`.
    pub fn pilot_covariance(&self) -> DMatrix<Complex64> {
        let bd = scale_columns(&self.b0, &self.d);
        &bd * self.b0.adjoint()
    }
}

fn scale_columns(b: &DMatrix<Complex64>, d: &[f64]) -> DMatrix<Complex64> {
    let mut out = b.clone();
    for (j, &v) in d.iter().enumerate() {
        out.column_mut(j).scale_mut(v);
    }
    out
}

/// Prior energies with a relative floor so that `D` stays invertible.
pub fn floored_energies(energies: &[f64]) -> Vec<f64> {
    let max = energies.iter().copied().fold(0.0, f64::max);
    let floor = if max > 0.0 { 1e-12 * max } else { 1.0 };
    energies.iter().map(|&e| e.max(floor)).collect()
}

fn quadrature_nodes(posterior: &DelayPosterior, energies: &[f64], rule: &QuadratureRule) -> Result<Vec<(usize, f64, f64)>> {
    if posterior.map_taus.len() != energies.len() || posterior.variances.len() != energies.len() {
        return Err(domain("posterior and energies disagree in length"));
    }
    let mut nodes = Vec::with_capacity(energies.len() * rule.len());
    for (i, ((&mu, &delta), &e)) in posterior.map_taus.iter().zip(&posterior.variances).zip(energies).enumerate() {
        let s = (2.0 * delta.max(0.0)).sqrt();
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            nodes.push((i, mu + s * x, e * w));
        }
    }
    Ok(nodes)
}

/// Frequency-only operator with `M` pilot rows and `K·M` extrapolation rows.
pub fn build_lox_operator(
    posterior: &DelayPosterior,
    energies: &[f64],
    rule: &QuadratureRule,
    cfg: &ChannelConfig,
) -> Result<LoxOperator> {
    let nodes = quadrature_nodes(posterior, energies, rule)?;
    let (mp, me) = (cfg.m, cfg.extrapolation_subcarriers());
    let mut b0 = DMatrix::zeros(mp, nodes.len());
    let mut be = DMatrix::zeros(me, nodes.len());
    for (j, &(_, tau, _)) in nodes.iter().enumerate() {
        b0.column_mut(j).copy_from_slice(&build_freq_atom(tau, cfg, Band::Pilot));
        be.column_mut(j).copy_from_slice(&build_freq_atom(tau, cfg, Band::Extrapolation));
    }
    LoxOperator::new(b0, be, nodes.iter().map(|n| n.2).collect())
}

/// Space-frequency operator: quadrature over delay, angles fixed at `thetas`.
pub fn build_lox_operator_2d(
    posterior: &DelayPosterior,
    thetas: &[f64],
    energies: &[f64],
    rule: &QuadratureRule,
    cfg: &ChannelConfig,
) -> Result<LoxOperator> {
    if thetas.len() != energies.len() {
        return Err(domain("angles and energies disagree in length"));
    }
    let nodes = quadrature_nodes(posterior, energies, rule)?;
    let steer: Vec<Vec<Complex64>> = thetas.iter().map(|&t| build_steering_atom(t, cfg)).collect();
    let mut b0 = DMatrix::zeros(cfg.len(), nodes.len());
    let mut be = DMatrix::zeros(cfg.n * cfg.extrapolation_subcarriers(), nodes.len());
    for (j, &(i, tau, _)) in nodes.iter().enumerate() {
        b0.column_mut(j).copy_from_slice(&kron(&build_freq_atom(tau, cfg, Band::Pilot), &steer[i]));
        be.column_mut(j).copy_from_slice(&kron(&build_freq_atom(tau, cfg, Band::Extrapolation), &steer[i]));
    }
    LoxOperator::new(b0, be, nodes.iter().map(|n| n.2).collect())
}

fn check_obs(op: &LoxOperator, obs: &[Complex64]) -> Result<()> {
    if op.b0.nrows() != obs.len() {
        return Err(domain(format!("observation has {} entries, operator expects {}", obs.len(), op.b0.nrows())));
    }
    Ok(())
}

/// `B_e(B₀ᴴB₀ + σ²D⁻¹)⁻¹B₀ᴴ y`.
pub fn lox_extrapolate(op: &LoxOperator, obs: &[Complex64], sigma2: f64) -> Result<Vec<Complex64>> {
    check_obs(op, obs)?;
    if op.ncols() == 0 {
        return Ok(vec![Complex64::new(0.0, 0.0); op.be.nrows()]);
    }
    let mut g = op.b0.adjoint() * &op.b0;
    for (j, &dj) in op.d.iter().enumerate() {
        g[(j, j)] += Complex64::new(sigma2 / dj, 0.0);
    }
    let z = solve_hermitian(&g, &(op.b0.adjoint() * DVector::from_column_slice(obs))).x;
    Ok((&op.be * z).iter().copied().collect())
}

/// `B_eDB₀ᴴ(B₀DB₀ᴴ + σ²I)⁻¹ y`, the observation-dimension form of [`lox_extrapolate`].
pub fn lox_extrapolate_direct(op: &LoxOperator, obs: &[Complex64], sigma2: f64) -> Result<Vec<Complex64>> {
    check_obs(op, obs)?;
    let mut c = op.pilot_covariance();
    for i in 0..c.nrows() {
        c[(i, i)] += Complex64::new(sigma2, 0.0);
    }
    let z = solve_hermitian(&c, &DVector::from_column_slice(obs)).x;
    let bed = scale_columns(&op.be, &op.d);
    Ok((bed * (op.b0.adjoint() * z)).iter().copied().collect())
}

/// Two-dimensional LOX operator built from a QNOMP result and its delay posterior.
pub fn estimate_operator(result: &EstimationResult, obs: &Observation, cfg: &ChannelConfig, lcfg: &LoxConfig) -> Result<LoxOperator> {
    let posterior = posterior_from_bfgs_with(result, cfg, lcfg.reading);
    let energies = floored_energies(&result.paths.energies());
    build_lox_operator_2d(&posterior, &result.paths.thetas, &energies, &lcfg.rule()?, cfg).and_then(|op| {
        check_obs(&op, &obs.h_prime)?;
        Ok(op)
    })
}

/// LOX of the full channel onto the extrapolation bands from a QNOMP result.
pub fn lox_extrapolate_2d(
    result: &EstimationResult,
    obs: &Observation,
    cfg: &ChannelConfig,
    rule: &QuadratureRule,
) -> Result<Vec<Complex64>> {
    let posterior = posterior_from_bfgs(result, cfg);
    let energies = floored_energies(&result.paths.energies());
    let op = build_lox_operator_2d(&posterior, &result.paths.thetas, &energies, rule, cfg)?;
    lox_extrapolate(&op, &obs.h_prime, obs.effective_sigma2())
}

/// LOX estimates of the pilot band and the extrapolation bands from one operator.
pub fn lox_estimate_2d(
    result: &EstimationResult,
    obs: &Observation,
    cfg: &ChannelConfig,
    lcfg: &LoxConfig,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let op = estimate_operator(result, obs, cfg, lcfg)?;
    let sigma2 = obs.effective_sigma2();
    Ok((lox_extrapolate(&op.pilot(), &obs.h_prime, sigma2)?, lox_extrapolate(&op, &obs.h_prime, sigma2)?))
}

/// Orthonormal basis with the associated eigenvalues of `B₀DB₀ᴴ` (descending).
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    pub vectors: DMatrix<Complex64>,
    pub eigenvalues: Vec<f64>,
}

/// Top-`r` eigenvectors of `B₀DB₀ᴴ` via a thin SVD of `B₀D^½`. Requests beyond the
/// operator's rank are completed with an orthonormal complement (eigenvalue 0).
pub fn optimal_basis(op: &LoxOperator, r: usize) -> Result<SubspaceBasis> {
    let rows = op.b0.nrows();
    if r > rows {
        return Err(domain(format!("rank {r} exceeds the observation dimension {rows}")));
    }
    let sqrt_d: Vec<f64> = op.d.iter().map(|v| v.sqrt()).collect();
    let f = scale_columns(&op.b0, &sqrt_d);
    let mut vecs: Vec<DVector<Complex64>> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    if f.ncols() > 0 {
        let svd = f.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        for &i in order.iter().take(r) {
            vecs.push(u.column(i).into_owned());
            vals.push(svd.singular_values[i].powi(2));
        }
    }
    let mut e = 0;
    while vecs.len() < r && e < rows {
        let mut v = DVector::<Complex64>::zeros(rows);
        v[e] = Complex64::new(1.0, 0.0);
        for _ in 0..2 {
            for q in &vecs {
                let proj = q.dotc(&v);
                v -= q * proj;
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            vecs.push(v / Complex64::new(n, 0.0));
            vals.push(0.0);
        }
        e += 1;
    }
    let vectors = if vecs.is_empty() { DMatrix::zeros(rows, 0) } else { DMatrix::from_columns(&vecs) };
    Ok(SubspaceBasis { vectors, eigenvalues: vals })
}

/// Number of covariance eigenvalues above the noise level.
pub fn adaptive_rank(eigenvalues: &[f64], sigma2: f64) -> usize {
    eigenvalues.iter().filter(|&&l| l > sigma2).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankEstimate {
    pub estimate: Vec<Complex64>,
    /// True when the supplied basis was not orthonormal and had to be re-orthonormalized.
    pub reorthonormalized: bool,
}

/// LMMSE extrapolation from the projected observation `Uᴴh′`:
/// `C_eh U (Uᴴ C_hh U)⁻¹ Uᴴ h′`.
pub fn lowrank_lox(op: &LoxOperator, obs: &[Complex64], sigma2: f64, basis: &DMatrix<Complex64>) -> Result<LowRankEstimate> {
    check_obs(op, obs)?;
    if basis.nrows() != obs.len() {
        return Err(domain("basis rows must match the observation length"));
    }
    let r = basis.ncols();
    if r == 0 {
        return Ok(LowRankEstimate { estimate: vec![Complex64::new(0.0, 0.0); op.be.nrows()], reorthonormalized: false });
    }
    let gram = basis.adjoint() * basis;
    let off = (&gram - DMatrix::<Complex64>::identity(r, r)).norm();
    let (u, reorthonormalized) = if off > 1e-8 { (basis.clone().qr().q(), true) } else { (basis.clone(), false) };
    let p = op.b0.adjoint() * &u; // B₀ᴴU
    let mut dp = p.clone();
    for (i, &di) in op.d.iter().enumerate() {
        dp.row_mut(i).scale_mut(di);
    }
    let mut m = p.adjoint() * &dp;
    for i in 0..r {
        m[(i, i)] += Complex64::new(sigma2, 0.0);
    }
    let z = solve_hermitian(&m, &(u.adjoint() * DVector::from_column_slice(obs))).x;
    let estimate = (&op.be * (dp * z)).iter().copied().collect();
    Ok(LowRankEstimate { estimate, reorthonormalized })
}

/// Predicted NMSE of the `k`-basis LMMSE estimator for one path with energy `e` and a
/// uniform delay prior whose kernel has eigenvalues `eigenvalues` (summing to `c`).
pub fn lowrank_nmse_formula(eigenvalues: &[f64], c: f64, k: usize, sigma2: f64, m: usize, e: f64) -> Result<f64> {
    if k > m || k > eigenvalues.len() {
        return Err(domain(format!("basis count {k} exceeds the available {}", eigenvalues.len().min(m))));
    }
    let noise = sigma2 / (m as f64 * e);
    let captured: f64 = eigenvalues[..k].iter().map(|&l| (l / c).powi(2) / (l / c + noise)).sum();
    Ok((1.0 - captured).clamp(0.0, 1.0))
}
