//! Profiled continuous-parameter loss, its analytic gradient and BFGS refinement.
//!
//! Internally delays and angles are optimized in grid units `u = τ/Δτ`,
//! `v = θ/Δθ`, with the objective divided by `‖h′‖²/σ²` so that the identity is a
//! sensible initial inverse Hessian. Public functions take and return physical units.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::bfgs::{minimize, ArmijoParams, BfgsOptions, BfgsState, HessianCoupling, Objective};
use crate::channel::{norm_sqr, ChannelConfig, Dictionary, Observation};
use crate::error::{domain, Result};
use crate::linalg::{solve_hermitian, AtomSet};

/// Gaussian prior covariance `E` on the path gains.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    /// `E = λI`.
    Scalar(f64),
    /// `E = diag(e)`.
    Diagonal(Vec<f64>),
}

impl Regularizer {
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            Self::Scalar(l) if !(*l > 0.0) => Err(domain(format!("regularizer λ must be positive, got {l}"))),
            Self::Diagonal(e) if e.len() != k => Err(domain(format!("regularizer has {} entries for {k} paths", e.len()))),
            Self::Diagonal(e) if e.iter().any(|v| !(*v > 0.0)) => Err(domain("regularizer entries must be positive")),
            _ => Ok(()),
        }
    }

    /// `E⁻¹` for `k` paths.
    pub fn inverse_diag(&self, k: usize) -> Vec<f64> {
        match self {
            Self::Scalar(l) => vec![1.0 / l; k],
            Self::Diagonal(e) => e.iter().map(|v| 1.0 / v).collect(),
        }
    }
}

/// Profiled loss over normalized parameters `x = [u; v]`, scaled by `scale`.
pub(crate) struct ProfileObjective<'a> {
    pub m: usize,
    pub n: usize,
    pub target: &'a [Complex64],
    pub sigma2: f64,
    pub inv_prior: Option<Vec<f64>>,
    pub scale: f64,
}

/// Everything computed at one parameter point.
pub(crate) struct ProfileEval {
    pub loss: f64,
    pub beta: Vec<Complex64>,
    pub residual: Vec<Complex64>,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

impl<'a> ProfileObjective<'a> {
    pub fn new(obs: &'a Observation, cfg: &ChannelConfig, inv_prior: Option<Vec<f64>>) -> Self {
        let sigma2 = obs.effective_sigma2();
        let energy = norm_sqr(&obs.h_prime);
        let scale = if energy > 0.0 { sigma2 / energy } else { 1.0 };
        Self { m: cfg.m, n: cfg.n, target: &obs.h_prime, sigma2, inv_prior, scale }
    }

    /// Unscaled loss, gains, residual `h′ − Aβ̂` and unscaled gradients.
    pub fn full(&self, us: &[f64], vs: &[f64]) -> ProfileEval {
        let k = us.len();
        if k == 0 {
            return ProfileEval {
                loss: norm_sqr(self.target) / self.sigma2,
                beta: Vec::new(),
                residual: self.target.to_vec(),
                grad_u: Vec::new(),
                grad_v: Vec::new(),
            };
        }
        let atoms = AtomSet::from_normalized(us, vs, self.m, self.n);
        let mut g = atoms.gram();
        if let Some(ip) = &self.inv_prior {
            for i in 0..k {
                g[(i, i)] += Complex64::new(self.sigma2 * ip[i], 0.0);
            }
        }
        let beta: Vec<Complex64> = solve_hermitian(&g, &atoms.adjoint_apply(self.target)).x.iter().copied().collect();
        let fit = atoms.apply(&beta);
        let err: Vec<Complex64> = fit.iter().zip(self.target).map(|(f, h)| f - h).collect();
        let mut loss = norm_sqr(&err) / self.sigma2;
        if let Some(ip) = &self.inv_prior {
            loss += beta.iter().zip(ip).map(|(b, e)| b.norm_sqr() * e).sum::<f64>();
        }
        let (du, dv) = atoms.derivative_adjoints(&err);
        let c = 2.0 / self.sigma2;
        let grad_u = beta.iter().zip(&du).map(|(b, d)| c * (b.conj() * d).re).collect();
        let grad_v = beta.iter().zip(&dv).map(|(b, d)| c * (b.conj() * d).re).collect();
        let residual = err.iter().map(|e| -e).collect();
        ProfileEval { loss, beta, residual, grad_u, grad_v }
    }
}

impl Objective for ProfileObjective<'_> {
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let k = x.len() / 2;
        let e = self.full(&x[..k], &x[k..]);
        let mut g = e.grad_u;
        g.extend(e.grad_v);
        g.iter_mut().for_each(|v| *v *= self.scale);
        (e.loss * self.scale, g)
    }
}

fn check_params(taus: &[f64], thetas: &[f64]) -> Result<()> {
    if taus.len() != thetas.len() {
        return Err(domain(format!("{} delays but {} angles", taus.len(), thetas.len())));
    }
    Ok(())
}

fn inv_prior(reg: Option<&Regularizer>, k: usize) -> Result<Option<Vec<f64>>> {
    match reg {
        Some(r) => {
            r.validate(k)?;
            Ok(Some(r.inverse_diag(k)))
        }
        None => Ok(None),
    }
}

fn normalize(taus: &[f64], thetas: &[f64], cfg: &ChannelConfig) -> (Vec<f64>, Vec<f64>) {
    let dt = cfg.delay_step();
    (taus.iter().map(|t| t / dt).collect(), thetas.iter().map(|t| t * cfg.n as f64).collect())
}

/// `(1/σ²)‖h′ − Aβ̂‖²` (plus `β̂ᴴE⁻¹β̂` when regularized) with `β̂` the profiled gains.
pub fn loss_profile(
    taus: &[f64],
    thetas: &[f64],
    obs: &Observation,
    cfg: &ChannelConfig,
    reg: Option<&Regularizer>,
) -> Result<f64> {
    check_params(taus, thetas)?;
    let (us, vs) = normalize(taus, thetas, cfg);
    let obj = ProfileObjective::new(obs, cfg, inv_prior(reg, taus.len())?);
    Ok(obj.full(&us, &vs).loss)
}

/// Gradient of [`loss_profile`] at fixed `β̂`, in physical units (per second, per unit angle).
pub fn grad_profile(
    taus: &[f64],
    thetas: &[f64],
    obs: &Observation,
    cfg: &ChannelConfig,
    reg: Option<&Regularizer>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_params(taus, thetas)?;
    let (us, vs) = normalize(taus, thetas, cfg);
    let obj = ProfileObjective::new(obs, cfg, inv_prior(reg, taus.len())?);
    let e = obj.full(&us, &vs);
    let dt = cfg.delay_step();
    let n = cfg.n as f64;
    Ok((e.grad_u.iter().map(|g| g / dt).collect(), e.grad_v.iter().map(|g| g * n).collect()))
}

/// `β̂ = (AᴴA + σ²E⁻¹)⁻¹Aᴴh′`.
pub fn regularized_gains(dictionary: &Dictionary, obs: &Observation, reg: &Regularizer) -> Result<Vec<Complex64>> {
    let k = dictionary.ncols();
    reg.validate(k)?;
    if dictionary.nrows() != obs.h_prime.len() {
        return Err(domain("dictionary rows and observation length disagree"));
    }
    let a = &dictionary.atoms;
    let mut g = a.adjoint() * a;
    let sigma2 = obs.effective_sigma2();
    for (i, e) in reg.inverse_diag(k).iter().enumerate() {
        g[(i, i)] += Complex64::new(sigma2 * e, 0.0);
    }
    let b = a.adjoint() * DVector::from_column_slice(&obs.h_prime);
    Ok(solve_hermitian(&g, &b).x.iter().copied().collect())
}

/// Budget and safeguards for one call of [`refine_offgrid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffgridOptions {
    pub iterations: usize,
    pub grad_tol: f64,
    pub coupling: HessianCoupling,
    pub armijo: ArmijoParams,
}

impl OffgridOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        Self { iterations, ..Self::default() }
    }
}

impl Default for OffgridOptions {
    fn default() -> Self {
        Self { iterations: 3, grad_tol: 1e-8, coupling: HessianCoupling::Decoupled, armijo: ArmijoParams::default() }
    }
}

/// Refined parameters plus the optimizer state in normalized, scaled coordinates.
#[derive(Debug, Clone)]
pub struct OffgridResult {
    pub taus: Vec<f64>,
    pub thetas: Vec<f64>,
    pub gains: Vec<Complex64>,
    pub residual: Vec<Complex64>,
    /// Unscaled loss at the returned parameters.
    pub loss: f64,
    pub state: BfgsState,
    /// Objective scale `σ²/‖h′‖²` used by the optimizer.
    pub scale: f64,
}

impl OffgridResult {
    /// Diagonal of the inverse-Hessian approximation of the unscaled loss for the
    /// delay block, in units of `Δτ²`. `None` if the delay block was never updated.
    pub fn delay_inv_hessian_diag(&self) -> Option<Vec<f64>> {
        let k = self.taus.len();
        let h = &self.state.inv_hessian;
        let block = h.ranges.iter().position(|r| r.start == 0)?;
        if h.updates[block] == 0 {
            return None;
        }
        Some(h.diagonal()[..k].iter().map(|d| d * self.scale).collect())
    }
}

pub(crate) fn block_ranges(k: usize, coupling: HessianCoupling) -> Vec<std::ops::Range<usize>> {
    match coupling {
        HessianCoupling::Decoupled => vec![0..k, k..2 * k],
        HessianCoupling::Joint => vec![0..2 * k],
    }
}

/// BFGS in normalized units; returns wrapped `(u, v)` and the state.
pub(crate) fn refine_normalized(
    us: &[f64],
    vs: &[f64],
    obj: &ProfileObjective<'_>,
    opts: &OffgridOptions,
) -> (Vec<f64>, Vec<f64>, BfgsState) {
    let k = us.len();
    let mut x0 = us.to_vec();
    x0.extend_from_slice(vs);
    let bopts = BfgsOptions { max_iter: opts.iterations, grad_tol: opts.grad_tol, armijo: opts.armijo };
    let st = minimize(obj, &x0, block_ranges(k, opts.coupling), &bopts);
    let (m, n) = (obj.m as f64, obj.n as f64);
    let u = st.x[..k].iter().map(|&u| u.rem_euclid(m)).map(|u| if u >= m { 0.0 } else { u }).collect();
    let v = st.x[k..].iter().map(|&v| (v + n / 2.0).rem_euclid(n) - n / 2.0).map(|v| if v >= n / 2.0 { -n / 2.0 } else { v }).collect();
    (u, v, st)
}

/// Joint BFGS refinement of all paths for `opts.iterations` steps.
pub fn refine_offgrid(
    initial_taus: &[f64],
    initial_thetas: &[f64],
    obs: &Observation,
    cfg: &ChannelConfig,
    opts: &OffgridOptions,
    reg: Option<&Regularizer>,
) -> Result<OffgridResult> {
    check_params(initial_taus, initial_thetas)?;
    if initial_taus.is_empty() {
        return Err(domain("off-grid refinement needs at least one path"));
    }
    let (us, vs) = normalize(initial_taus, initial_thetas, cfg);
    let obj = ProfileObjective::new(obs, cfg, inv_prior(reg, us.len())?);
    let (u, v, state) = refine_normalized(&us, &vs, &obj, opts);
    let e = obj.full(&u, &v);
    let dt = cfg.delay_step();
    Ok(OffgridResult {
        taus: u.iter().map(|u| u * dt).collect(),
        thetas: v.iter().map(|v| v / cfg.n as f64).collect(),
        gains: e.beta,
        residual: e.residual,
        loss: e.loss,
        state,
        scale: obj.scale,
    })
}
