//! Comparison estimators (fine-grid OMP, OMP with local refinement, NOMP) and the
//! deterministic Cramér–Rao bound on path delays.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{build_freq_atom, build_steering_atom, norm_sqr, Band, ChannelConfig, Observation, PathSet};
use crate::error::{domain, Error, Result};
use crate::ongrid::{local_grid_power, ls_fit_normalized, Correlator, RefinementSpec};
use crate::qnomp::{cfar_threshold, finish, greedy_stage, Diagnostics, EstimationResult, GreedyOptions};
use crate::offgrid::OffgridOptions;

/// Default cap on fine-grid cells.
pub const DEFAULT_CELL_BUDGET: usize = 1 << 24;

/// Fine uniform grid searched by [`omp_finegrid`].
enum FineGrid {
    /// Integer oversampling handled by zero-padded FFTs.
    Fft(Box<Correlator>),
    /// Arbitrary spacing evaluated separably.
    Separable { taus: Vec<f64>, thetas: Vec<f64> },
}

fn fine_grid(cfg: &ChannelConfig, grid_scale: f64, budget: usize) -> Result<FineGrid> {
    if !(grid_scale > 0.0 && grid_scale <= 1.0) {
        return Err(domain(format!("grid scale must lie in (0, 1], got {grid_scale}")));
    }
    let inv = grid_scale.recip();
    let nd = (cfg.n as f64 * inv).ceil() as usize;
    let md = (cfg.m as f64 * inv).ceil() as usize;
    if md.saturating_mul(nd) > budget {
        return Err(Error::GridTooLarge { cells: md.saturating_mul(nd), budget });
    }
    let p = inv.round();
    if (inv - p).abs() < 1e-9 {
        return Ok(FineGrid::Fft(Box::new(Correlator::new(cfg, p as usize, p as usize))));
    }
    let dt = cfg.delay_step() * grid_scale;
    let da = cfg.angle_step() * grid_scale;
    Ok(FineGrid::Separable {
        taus: (0..md).map(|i| i as f64 * dt).collect(),
        thetas: (0..nd).map(|j| -0.5 + j as f64 * da).collect(),
    })
}

/// On-grid OMP over a uniform grid of spacing `grid_scale·Δ` in both axes, stopped by
/// the same CFAR test (on the standard grid) as QNOMP.
pub fn omp_finegrid(
    obs: &Observation,
    cfg: &ChannelConfig,
    grid_scale: f64,
    p_fa: f64,
    max_paths: usize,
    cell_budget: usize,
) -> Result<EstimationResult> {
    let mut grid = fine_grid(cfg, grid_scale, cell_budget)?;
    let threshold = cfar_threshold(cfg, obs.effective_sigma2(), p_fa)?;
    let mut coarse = Correlator::new(cfg, 1, 1);
    let (dt, n) = (cfg.delay_step(), cfg.n as f64);
    let mut d = Diagnostics::default();
    let (mut us, mut vs, mut betas) = (Vec::new(), Vec::new(), Vec::new());
    let mut residual = obs.h_prime.clone();
    d.residual_norms.push(norm_sqr(&residual).sqrt());
    loop {
        let (tau, theta, peak2) = match &mut grid {
            FineGrid::Fft(c) if c.cells() == cfg.len() => {
                let s = c.select(&residual);
                (s.tau, s.theta, s.peak * s.peak)
            }
            FineGrid::Fft(c) => {
                let s = c.select(&residual);
                (s.tau, s.theta, coarse.peak_power(&residual))
            }
            FineGrid::Separable { taus, thetas } => {
                let power = local_grid_power(&residual, taus, thetas, cfg);
                let best = argmax(&power);
                (taus[best / thetas.len()], thetas[best % thetas.len()], coarse.peak_power(&residual))
            }
        };
        if peak2 <= threshold {
            break;
        }
        if us.len() >= max_paths {
            d.truncated = true;
            break;
        }
        us.push(tau / dt);
        vs.push(theta * n);
        let (b, r) = ls_fit_normalized(&us, &vs, &obs.h_prime, cfg);
        betas = b;
        residual = r;
        d.omp_iterations += 1;
        d.residual_norms.push(norm_sqr(&residual).sqrt());
    }
    let rn = norm_sqr(&residual).sqrt();
    d.pre_joint_residual = residual;
    Ok(finish(&us, &vs, betas, None, rn, d, cfg))
}

fn argmax(v: &[f64]) -> usize {
    let (mut best, mut val) = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > val {
            best = i;
            val = x;
        }
    }
    best
}

/// OMP with multi-resolution local refinement and no continuous optimization.
pub fn omp_refined(
    obs: &Observation,
    cfg: &ChannelConfig,
    refinement: &RefinementSpec,
    p_fa: f64,
    max_paths: usize,
) -> Result<EstimationResult> {
    refinement.validate()?;
    let g = greedy_stage(
        obs,
        cfg,
        &GreedyOptions { refinement: *refinement, n_in: 0, p_fa, max_paths, offgrid: OffgridOptions::default() },
    )?;
    let rn = norm_sqr(&g.diagnostics.pre_joint_residual).sqrt();
    Ok(finish(&g.us, &g.vs, g.betas, None, rn, g.diagnostics, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NompConfig {
    /// Newton steps on each new detection.
    pub rs: usize,
    /// Cyclic refinement rounds after each detection.
    pub rc: usize,
    /// Cyclic rounds after the detection loop stops.
    pub n_out: usize,
    pub p_fa: f64,
    pub max_paths: usize,
    /// Detection grid spacing as a fraction of the standard step.
    pub detection_scale: f64,
}

impl Default for NompConfig {
    fn default() -> Self {
        Self { rs: 1, rc: 3, n_out: 40, p_fa: 0.01, max_paths: 32, detection_scale: 0.1 }
    }
}

/// `c = a(u, v)ᴴ r` and its first and second derivatives in normalized units.
struct Correlation {
    c: Complex64,
    cu: Complex64,
    cv: Complex64,
    cuu: Complex64,
    cuv: Complex64,
    cvv: Complex64,
}

fn correlation_derivs(u: f64, v: f64, r: &[Complex64], m: usize, n: usize) -> Correlation {
    let zero = Complex64::new(0.0, 0.0);
    let (mut w0, mut w1, mut w2) = (vec![zero; m], vec![zero; m], vec![zero; m]);
    let jn = Complex64::new(0.0, 2.0 * PI / n as f64);
    let sv: Vec<Complex64> = (0..n).map(|a| Complex64::from_polar(1.0, 2.0 * PI * v * a as f64 / n as f64)).collect();
    for (k, row) in r.chunks_exact(n).enumerate() {
        for (a, (x, s)) in row.iter().zip(&sv).enumerate() {
            let t = x * s;
            let da = jn * a as f64;
            w0[k] += t;
            w1[k] += da * t;
            w2[k] += da * da * t;
        }
    }
    let jm = Complex64::new(0.0, 2.0 * PI / m as f64);
    let mut out = Correlation { c: zero, cu: zero, cv: zero, cuu: zero, cuv: zero, cvv: zero };
    for k in 0..m {
        let f = Complex64::from_polar(1.0, 2.0 * PI * u * k as f64 / m as f64);
        let dk = jm * k as f64;
        out.c += f * w0[k];
        out.cu += dk * f * w0[k];
        out.cuu += dk * dk * f * w0[k];
        out.cv += f * w1[k];
        out.cuv += dk * f * w1[k];
        out.cvv += f * w2[k];
    }
    out
}

/// One single-path ascent step on `S(u, v) = |a(u, v)ᴴ r|²`. Returns the new point and
/// whether the Newton step had to be replaced by gradient ascent.
fn single_path_step(u: f64, v: f64, r: &[Complex64], m: usize, n: usize) -> (f64, f64, bool) {
    let d = correlation_derivs(u, v, r, m, n);
    let s0 = d.c.norm_sqr();
    let gu = 2.0 * (d.c.conj() * d.cu).re;
    let gv = 2.0 * (d.c.conj() * d.cv).re;
    let huu = 2.0 * (d.cu.norm_sqr() + (d.c.conj() * d.cuu).re);
    let hvv = 2.0 * (d.cv.norm_sqr() + (d.c.conj() * d.cvv).re);
    let huv = 2.0 * ((d.cu.conj() * d.cv).re + (d.c.conj() * d.cuv).re);
    let det = huu * hvv - huv * huv;
    let value = |u: f64, v: f64| correlation_derivs(u, v, r, m, n).c.norm_sqr();
    if huu < 0.0 && det > 0.0 {
        let du = -(hvv * gu - huv * gv) / det;
        let dv = -(huu * gv - huv * gu) / det;
        if value(u + du, v + dv) >= s0 {
            return (u + du, v + dv, false);
        }
    }
    let gn = gu.abs().max(gv.abs());
    if gn == 0.0 {
        return (u, v, true);
    }
    let mut t = 0.5 / gn;
    for _ in 0..30 {
        let (nu, nv) = (u + t * gu, v + t * gv);
        if value(nu, nv) > s0 {
            return (nu, nv, true);
        }
        t *= 0.5;
    }
    (u, v, true)
}

fn add_path(r: &mut [Complex64], u: f64, v: f64, beta: Complex64, m: usize, n: usize, sign: f64) {
    let sv: Vec<Complex64> = (0..n).map(|a| Complex64::from_polar(1.0, -2.0 * PI * v * a as f64 / n as f64)).collect();
    for (k, row) in r.chunks_exact_mut(n).enumerate() {
        let f = Complex64::from_polar(1.0, -2.0 * PI * u * k as f64 / m as f64) * beta * sign;
        for (x, s) in row.iter_mut().zip(&sv) {
            *x += f * s;
        }
    }
}

struct NompState<'a> {
    us: Vec<f64>,
    vs: Vec<f64>,
    betas: Vec<Complex64>,
    residual: Vec<Complex64>,
    target: &'a [Complex64],
    m: usize,
    n: usize,
    fallbacks: usize,
}

impl NompState<'_> {
    /// Refine path `i` against the residual with its own contribution added back.
    fn refine_one(&mut self, i: usize, steps: usize) {
        let (m, n) = (self.m, self.n);
        add_path(&mut self.residual, self.us[i], self.vs[i], self.betas[i], m, n, 1.0);
        for _ in 0..steps {
            let (u, v, fb) = single_path_step(self.us[i], self.vs[i], &self.residual, m, n);
            self.us[i] = u;
            self.vs[i] = v;
            self.fallbacks += fb as usize;
        }
        let c = correlation_derivs(self.us[i], self.vs[i], &self.residual, m, n).c;
        self.betas[i] = c / (m * n) as f64;
        add_path(&mut self.residual, self.us[i], self.vs[i], self.betas[i], m, n, -1.0);
    }

    fn cyclic(&mut self, rounds: usize) {
        for _ in 0..rounds {
            let mut order: Vec<usize> = (0..self.us.len()).collect();
            order.sort_by(|&a, &b| self.betas[b].norm_sqr().total_cmp(&self.betas[a].norm_sqr()).then(a.cmp(&b)));
            for i in order {
                self.refine_one(i, 1);
            }
        }
    }

    fn refit(&mut self, cfg: &ChannelConfig) {
        let (b, r) = ls_fit_normalized(&self.us, &self.vs, self.target, cfg);
        self.betas = b;
        self.residual = r;
    }
}

/// Newtonized OMP: fine-grid detection, `Rs` single-path Newton steps per detection,
/// `Rc` cyclic rounds over all paths, LS gain refits, and `n_out` final cyclic rounds.
pub fn nomp_run(obs: &Observation, cfg: &ChannelConfig, ncfg: &NompConfig) -> Result<EstimationResult> {
    let mut grid = match fine_grid(cfg, ncfg.detection_scale, DEFAULT_CELL_BUDGET)? {
        FineGrid::Fft(c) => c,
        FineGrid::Separable { .. } => return Err(domain("NOMP detection scale must be 1/integer")),
    };
    let threshold = cfar_threshold(cfg, obs.effective_sigma2(), ncfg.p_fa)?;
    let mut coarse = Correlator::new(cfg, 1, 1);
    let (dt, nf) = (cfg.delay_step(), cfg.n as f64);
    let mut d = Diagnostics::default();
    let mut st = NompState {
        us: Vec::new(),
        vs: Vec::new(),
        betas: Vec::new(),
        residual: obs.h_prime.clone(),
        target: &obs.h_prime,
        m: cfg.m,
        n: cfg.n,
        fallbacks: 0,
    };
    d.residual_norms.push(norm_sqr(&st.residual).sqrt());
    loop {
        if coarse.peak_power(&st.residual) <= threshold {
            break;
        }
        if st.us.len() >= ncfg.max_paths {
            d.truncated = true;
            break;
        }
        let s = grid.select(&st.residual);
        st.us.push(s.tau / dt);
        st.vs.push(s.theta * nf);
        st.betas.push(Complex64::new(0.0, 0.0));
        let i = st.us.len() - 1;
        st.refine_one(i, ncfg.rs);
        st.refit(cfg);
        st.cyclic(ncfg.rc);
        st.refit(cfg);
        d.omp_iterations += 1;
        d.residual_norms.push(norm_sqr(&st.residual).sqrt());
    }
    d.pre_joint_residual = st.residual.clone();
    st.cyclic(ncfg.n_out);
    if !st.us.is_empty() {
        st.refit(cfg);
    }
    d.gradient_fallbacks = st.fallbacks;
    let rn = norm_sqr(&st.residual).sqrt();
    Ok(finish(&st.us, &st.vs, st.betas, None, rn, d, cfg))
}

/// Deterministic CRB on each path delay (seconds²) from the Fisher information over
/// `(τ, θ, Re β, Im β)` of all paths.
pub fn delay_crb(paths: &PathSet, cfg: &ChannelConfig, sigma2: f64) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0) {
        return Err(domain(format!("CRB needs a positive noise variance, got {sigma2}")));
    }
    let k = paths.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let (m, n) = (cfg.m, cfg.n);
    let rows = m * n;
    // Jacobian in normalized units u = τ/Δτ, v = θN; columns [u_i, v_i, Re β_i, Im β_i].
    let mut jac = DMatrix::<Complex64>::zeros(rows, 4 * k);
    for i in 0..k {
        let f = build_freq_atom(paths.taus[i], cfg, Band::Pilot);
        let s = build_steering_atom(paths.thetas[i], cfg);
        let b = paths.betas[i];
        for kk in 0..m {
            for a in 0..n {
                let atom = f[kk] * s[a];
                let row = kk * n + a;
                jac[(row, 4 * i)] = Complex64::new(0.0, -2.0 * PI * kk as f64 / m as f64) * b * atom;
                jac[(row, 4 * i + 1)] = Complex64::new(0.0, -2.0 * PI * a as f64 / n as f64) * b * atom;
                jac[(row, 4 * i + 2)] = atom;
                jac[(row, 4 * i + 3)] = Complex64::new(0.0, 1.0) * atom;
            }
        }
    }
    let jj = jac.adjoint() * &jac;
    let fim = DMatrix::from_fn(4 * k, 4 * k, |r, c| 2.0 / sigma2 * jj[(r, c)].re);
    let eig = SymmetricEigen::new(fim);
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max) {
        return Err(Error::SingularFisher(format!("eigenvalue ratio {:e}", min / max)));
    }
    let dt = cfg.delay_step();
    Ok((0..k)
        .map(|i| {
            let idx = 4 * i;
            let var_u: f64 = (0..4 * k).map(|j| eig.eigenvectors[(idx, j)].powi(2) / eig.eigenvalues[j]).sum();
            var_u * dt * dt
        })
        .collect())
}
