//! Greedy detection loop with local grid refinement, per-iteration BFGS, CFAR stopping
//! and a final regularized joint refinement.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bfgs::{ArmijoParams, HessianCoupling};
use crate::channel::{norm_sqr, synthesize_band, Band, ChannelConfig, Observation, PathSet};
use crate::error::{domain, Result};
use crate::offgrid::{refine_normalized, OffgridOptions, ProfileObjective, Regularizer};
use crate::ongrid::{local_refine, ls_fit_normalized, Correlator, RefinementSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QnompConfig {
    pub refinement: RefinementSpec,
    /// BFGS iterations after each detection.
    pub n_in: usize,
    /// BFGS iterations of the final joint stage.
    pub n_out: usize,
    pub p_fa: f64,
    /// Fixed gain prior `E = λI`; `None` uses the mean detected path energy.
    pub lambda: Option<f64>,
    pub max_paths: usize,
    pub coupling: HessianCoupling,
    /// Early exit threshold on the gradient (normalized units, scaled loss).
    pub grad_tol: f64,
}

impl Default for QnompConfig {
    fn default() -> Self {
        Self {
            refinement: RefinementSpec::default(),
            n_in: 3,
            n_out: 40,
            p_fa: 0.01,
            lambda: None,
            max_paths: 32,
            coupling: HessianCoupling::Decoupled,
            grad_tol: 1e-8,
        }
    }
}

impl QnompConfig {
    pub fn validate(&self) -> Result<()> {
        self.refinement.validate()?;
        check_pfa(self.p_fa)?;
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(domain(format!("lambda must be positive, got {l}")));
            }
        }
        if self.max_paths == 0 {
            return Err(domain("max_paths must be at least 1"));
        }
        Ok(())
    }

    fn offgrid(&self, iterations: usize) -> OffgridOptions {
        OffgridOptions { iterations, grad_tol: self.grad_tol, coupling: self.coupling, armijo: ArmijoParams::default() }
    }
}

/// Counters and intermediate quantities of one estimator run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub omp_iterations: usize,
    /// Residual norm before the first detection and after every detection.
    pub residual_norms: Vec<f64>,
    /// Residual at the end of the greedy stage, before any joint refinement.
    pub pre_joint_residual: Vec<Complex64>,
    pub truncated: bool,
    pub bfgs_iterations: usize,
    pub skipped_updates: usize,
    pub hessian_resets: usize,
    pub stalled_searches: usize,
    /// Newton steps replaced by gradient steps (NOMP only).
    pub gradient_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    /// Estimated paths sorted by descending `|β|`.
    pub paths: PathSet,
    /// Inverse-Hessian diagonal of the loss for each delay, in units of `Δτ²`,
    /// aligned with `paths`. `None` when no curvature information was gathered.
    pub delay_inv_hessian_diag: Option<Vec<f64>>,
    pub residual_norm: f64,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

fn check_pfa(p_fa: f64) -> Result<()> {
    if !(p_fa > 0.0 && p_fa < 1.0) {
        return Err(domain(format!("false-alarm probability must lie in (0, 1), got {p_fa}")));
    }
    Ok(())
}

/// Stopping threshold on `max |⟨a, r⟩|²` over the standard grid:
/// `NMσ²·(log(NM) − log(−log(1 − p_fa)))`.
///
/// Under pure noise each grid correlation divided by `NMσ²` is a unit exponential and the
/// `NM` grid points are independent, so the maximum exceeds this with probability ≈ `p_fa`.
pub fn cfar_threshold(cfg: &ChannelConfig, sigma2: f64, p_fa: f64) -> Result<f64> {
    check_pfa(p_fa)?;
    if !(sigma2 > 0.0) {
        return Err(domain(format!("CFAR threshold needs a positive noise variance, got {sigma2}")));
    }
    let nm = cfg.len() as f64;
    let z = nm.ln() - (-(-p_fa).ln_1p()).ln();
    Ok(nm * sigma2 * z)
}

/// Settings of the shared greedy stage.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GreedyOptions {
    pub refinement: RefinementSpec,
    pub n_in: usize,
    pub p_fa: f64,
    pub max_paths: usize,
    pub offgrid: OffgridOptions,
}

/// Output of the greedy stage in normalized units.
pub(crate) struct GreedyOutcome {
    pub us: Vec<f64>,
    pub vs: Vec<f64>,
    pub betas: Vec<Complex64>,
    pub diagnostics: Diagnostics,
}

/// Detect → refine on local grids → BFGS over all paths → LS gains, until CFAR.
pub(crate) fn greedy_stage(obs: &Observation, cfg: &ChannelConfig, opts: &GreedyOptions) -> Result<GreedyOutcome> {
    let sigma2 = obs.effective_sigma2();
    let threshold = cfar_threshold(cfg, sigma2, opts.p_fa)?;
    let mut corr = Correlator::new(cfg, 1, 1);
    let grid = corr.grid().clone();
    let obj = ProfileObjective::new(obs, cfg, None);
    let (dt, n) = (cfg.delay_step(), cfg.n as f64);
    let mut d = Diagnostics::default();
    let (mut us, mut vs, mut betas) = (Vec::new(), Vec::new(), Vec::new());
    let mut residual = obs.h_prime.clone();
    d.residual_norms.push(norm_sqr(&residual).sqrt());
    loop {
        let sel = corr.select(&residual);
        if sel.peak * sel.peak <= threshold {
            break;
        }
        if us.len() >= opts.max_paths {
            d.truncated = true;
            break;
        }
        let (tau, theta) = local_refine(&residual, sel.tau, sel.theta, &grid, &opts.refinement, cfg);
        us.push(tau / dt);
        vs.push(theta * n);
        if opts.n_in > 0 {
            let (u, v, st) = refine_normalized(&us, &vs, &obj, &OffgridOptions { iterations: opts.n_in, ..opts.offgrid });
            us = u;
            vs = v;
            d.bfgs_iterations += st.iterations;
            d.skipped_updates += st.skipped_updates;
            d.hessian_resets += st.resets;
            d.stalled_searches += st.stalled as usize;
        }
        let (b, r) = ls_fit_normalized(&us, &vs, &obs.h_prime, cfg);
        betas = b;
        residual = r;
        d.omp_iterations += 1;
        d.residual_norms.push(norm_sqr(&residual).sqrt());
    }
    d.pre_joint_residual = residual;
    Ok(GreedyOutcome { us, vs, betas, diagnostics: d })
}

/// Assemble a sorted result from normalized parameters.
pub(crate) fn finish(
    us: &[f64],
    vs: &[f64],
    betas: Vec<Complex64>,
    hdiag: Option<Vec<f64>>,
    residual_norm: f64,
    diagnostics: Diagnostics,
    cfg: &ChannelConfig,
) -> EstimationResult {
    let dt = cfg.delay_step();
    let paths = PathSet {
        taus: us.iter().map(|u| u * dt).collect(),
        thetas: vs.iter().map(|v| v / cfg.n as f64).collect(),
        betas,
    }
    .canonical(cfg);
    let order = paths.gain_order();
    EstimationResult {
        paths: paths.permuted(&order),
        delay_inv_hessian_diag: hdiag.map(|h| order.iter().map(|&i| h[i]).collect()),
        residual_norm,
        diagnostics,
    }
}

/// Full QNOMP estimator.
pub fn qnomp_run(obs: &Observation, cfg: &ChannelConfig, qcfg: &QnompConfig) -> Result<EstimationResult> {
    qcfg.validate()?;
    let g = greedy_stage(
        obs,
        cfg,
        &GreedyOptions {
            refinement: qcfg.refinement,
            n_in: qcfg.n_in,
            p_fa: qcfg.p_fa,
            max_paths: qcfg.max_paths,
            offgrid: qcfg.offgrid(qcfg.n_in),
        },
    )?;
    let mut d = g.diagnostics;
    let k = g.us.len();
    if k == 0 {
        let rn = norm_sqr(&obs.h_prime).sqrt();
        return Ok(finish(&[], &[], Vec::new(), None, rn, d, cfg));
    }
    let energy = norm_sqr(&g.betas) / k as f64;
    let lambda = qcfg.lambda.unwrap_or(if energy > 0.0 { energy } else { 1.0 });
    let reg = Regularizer::Scalar(lambda);
    let obj = ProfileObjective::new(obs, cfg, Some(reg.inverse_diag(k)));
    let (us, vs, st) = refine_normalized(&g.us, &g.vs, &obj, &qcfg.offgrid(qcfg.n_out));
    d.bfgs_iterations += st.iterations;
    d.skipped_updates += st.skipped_updates;
    d.hessian_resets += st.resets;
    d.stalled_searches += st.stalled as usize;
    let hdiag = {
        let h = &st.inv_hessian;
        let block = h.ranges.iter().position(|r| r.start == 0).expect("delay block");
        (h.updates[block] > 0).then(|| h.diagonal()[..k].iter().map(|v| v * obj.scale).collect::<Vec<f64>>())
    };
    let e = obj.full(&us, &vs);
    let rn = norm_sqr(&e.residual).sqrt();
    Ok(finish(&us, &vs, e.beta, hdiag, rn, d, cfg))
}

/// Model-based extrapolation onto bands `f = (M..M(K+1))Δf` from estimated parameters.
pub fn extrapolate_plugin(result: &EstimationResult, cfg: &ChannelConfig) -> Vec<Complex64> {
    synthesize_band(&result.paths, cfg, Band::Extrapolation)
}
