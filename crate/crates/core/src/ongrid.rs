//! On-grid correlation search, multi-resolution local refinement and least-squares gains.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::{wrap_angle, wrap_delay, ChannelConfig, Dictionary};
use crate::error::{domain, Result};
use crate::linalg::{solve_hermitian, AtomSet};

/// Uniform delay/angle grid. The default is the standard orthogonal grid with `M`
/// delays `iΔτ` and `N` angles `(j − N/2)/N`; finer grids use `P·M` and `Q·N` points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub delay_step: f64,
    pub angle_step: f64,
    pub delay_points: Vec<f64>,
    pub angle_points: Vec<f64>,
}

impl GridSpec {
    pub fn standard(cfg: &ChannelConfig) -> Self {
        Self::oversampled(cfg, 1, 1)
    }

    /// Grid refined by integer factors `p` (delay) and `q` (angle).
    pub fn oversampled(cfg: &ChannelConfig, p: usize, q: usize) -> Self {
        let (md, nd) = (cfg.m * p, cfg.n * q);
        let delay_step = cfg.delay_step() / p as f64;
        let angle_step = cfg.angle_step() / q as f64;
        Self {
            delay_step,
            angle_step,
            delay_points: (0..md).map(|i| i as f64 * delay_step).collect(),
            angle_points: (0..nd).map(|j| (j as f64 - (nd / 2) as f64) / nd as f64).collect(),
        }
    }
}

/// Local refinement schedule: `n_lr` levels of `(2k1+1)×(2k2+1)` grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSpec {
    pub k1: usize,
    pub k2: usize,
    pub n_lr: usize,
}

impl Default for RefinementSpec {
    fn default() -> Self {
        Self { k1: 10, k2: 10, n_lr: 1 }
    }
}

impl RefinementSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(domain("refinement rates k1, k2 must be at least 1"));
        }
        Ok(())
    }

    /// Final grid spacing as a fraction of the standard step, per axis.
    pub fn final_resolution(&self) -> (f64, f64) {
        ((self.k1 as f64).powi(self.n_lr as i32).recip(), (self.k2 as f64).powi(self.n_lr as i32).recip())
    }
}

/// Best grid point of a correlation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub tau: f64,
    pub theta: f64,
    pub delay_index: usize,
    pub angle_index: usize,
    /// `|⟨a, r⟩|` at the selected point.
    pub peak: f64,
}

/// Full-grid correlator `|a(τᵢ, θⱼ)ᴴ r|` via zero-padded 2-D inverse FFTs.
///
/// For a grid refined by `(p, q)` the correlation at delay index `i` and angle
/// index `j` is the `(i, (j − Nq/2) mod Nq)` bin of the unnormalized inverse DFT of
/// `r` reshaped to `M × N` and zero-padded to `Mp × Nq`.
pub struct Correlator {
    m: usize,
    n: usize,
    md: usize,
    nd: usize,
    grid: GridSpec,
    fft_rows: Arc<dyn Fft<f64>>,
    fft_cols: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    buf: Vec<Complex64>,
    cols: Vec<Complex64>,
}

impl std::fmt::Debug for Correlator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Correlator").field("m", &self.m).field("n", &self.n).field("md", &self.md).field("nd", &self.nd).finish()
    }
}

impl Correlator {
    pub fn new(cfg: &ChannelConfig, p: usize, q: usize) -> Self {
        let (md, nd) = (cfg.m * p, cfg.n * q);
        let mut planner = FftPlanner::new();
        let fft_rows = planner.plan_fft_inverse(nd);
        let fft_cols = planner.plan_fft_inverse(md);
        let scratch_len = fft_rows.get_inplace_scratch_len().max(fft_cols.get_inplace_scratch_len());
        Self {
            m: cfg.m,
            n: cfg.n,
            md,
            nd,
            grid: GridSpec::oversampled(cfg, p, q),
            fft_rows,
            fft_cols,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            buf: vec![Complex64::new(0.0, 0.0); md * nd],
            cols: vec![Complex64::new(0.0, 0.0); md * nd],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn cells(&self) -> usize {
        self.md * self.nd
    }

    /// Correlations `a(τᵢ, θⱼ)ᴴ r`, delay-major over the grid (`i * Nq + j`).
    pub fn correlate(&mut self, r: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(r.len(), self.m * self.n, "residual length must be N·M");
        let (md, nd) = (self.md, self.nd);
        self.buf.fill(Complex64::new(0.0, 0.0));
        for k in 0..self.m {
            let row = &mut self.buf[k * nd..(k + 1) * nd];
            row[..self.n].copy_from_slice(&r[k * self.n..(k + 1) * self.n]);
            self.fft_rows.process_with_scratch(row, &mut self.scratch);
        }
        // Column transforms on a transposed copy; rows beyond M are zero before transforming.
        for b in 0..nd {
            let col = &mut self.cols[b * md..(b + 1) * md];
            for k in 0..md {
                col[k] = self.buf[k * nd + b];
            }
            self.fft_cols.process_with_scratch(col, &mut self.scratch);
        }
        let half = nd / 2;
        let mut out = vec![Complex64::new(0.0, 0.0); md * nd];
        for i in 0..md {
            for j in 0..nd {
                let b = (j + nd - half) % nd;
                out[i * nd + j] = self.cols[b * md + i];
            }
        }
        out
    }

    /// Grid point with the largest `|⟨a, r⟩|`; ties go to the lowest delay-major index.
    pub fn select(&mut self, r: &[Complex64]) -> Selection {
        let corr = self.correlate(r);
        let (mut best, mut best_val) = (0usize, f64::NEG_INFINITY);
        for (idx, c) in corr.iter().enumerate() {
            let v = c.norm_sqr();
            if v > best_val {
                best = idx;
                best_val = v;
            }
        }
        let (i, j) = (best / self.nd, best % self.nd);
        Selection {
            tau: self.grid.delay_points[i],
            theta: self.grid.angle_points[j],
            delay_index: i,
            angle_index: j,
            peak: best_val.sqrt(),
        }
    }

    /// `max |⟨a, r⟩|²` over the grid.
    pub fn peak_power(&mut self, r: &[Complex64]) -> f64 {
        self.correlate(r).iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
    }
}

/// Coarse search over `grid` (which must be a uniform grid aligned with `cfg`).
pub fn coarse_select(residual: &[Complex64], grid: &GridSpec, cfg: &ChannelConfig) -> Selection {
    let p = (cfg.delay_step() / grid.delay_step).round().max(1.0) as usize;
    let q = (cfg.angle_step() / grid.angle_step).round().max(1.0) as usize;
    Correlator::new(cfg, p, q).select(residual)
}

/// `|⟨a(τ̃ᵢ, θ̃ⱼ), r⟩|²` over a separable local grid, delay-major.
pub(crate) fn local_grid_power(
    residual: &[Complex64],
    taus: &[f64],
    thetas: &[f64],
    cfg: &ChannelConfig,
) -> Vec<f64> {
    let (m, n) = (cfg.m, cfg.n);
    // v_j[k] = Σ_a r[k, a]·exp(+j2π a θ̃ⱼ)
    let vs: Vec<Vec<Complex64>> = thetas
        .iter()
        .map(|&th| {
            let s: Vec<Complex64> = (0..n).map(|a| Complex64::from_polar(1.0, 2.0 * PI * th * a as f64)).collect();
            residual.chunks_exact(n).map(|row| row.iter().zip(&s).map(|(x, s)| x * s).sum()).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(taus.len() * thetas.len());
    for &tau in taus {
        let f: Vec<Complex64> =
            (0..m).map(|k| Complex64::from_polar(1.0, 2.0 * PI * tau * cfg.delta_f * k as f64)).collect();
        for v in &vs {
            let c: Complex64 = f.iter().zip(v).map(|(f, v)| f * v).sum();
            out.push(c.norm_sqr());
        }
    }
    out
}

/// Multi-resolution refinement around a coarse estimate. Level `ℓ` searches offsets
/// `−k..=k` with spacing `Δ/k^(ℓ+1)` per axis; points are wrapped into the periodic domain.
pub fn local_refine(
    residual: &[Complex64],
    tau0: f64,
    theta0: f64,
    grid: &GridSpec,
    spec: &RefinementSpec,
    cfg: &ChannelConfig,
) -> (f64, f64) {
    let period = cfg.delay_period();
    let (k1, k2) = (spec.k1 as i64, spec.k2 as i64);
    let (mut tau, mut theta) = (tau0, theta0);
    let (mut dt, mut da) = (grid.delay_step, grid.angle_step);
    for _ in 0..spec.n_lr {
        dt /= spec.k1 as f64;
        da /= spec.k2 as f64;
        let taus: Vec<f64> = (-k1..=k1).map(|i| wrap_delay(tau + i as f64 * dt, period)).collect();
        let thetas: Vec<f64> = (-k2..=k2).map(|j| wrap_angle(theta + j as f64 * da)).collect();
        let power = local_grid_power(residual, &taus, &thetas, cfg);
        let (mut best, mut best_val) = (0usize, f64::NEG_INFINITY);
        for (idx, &v) in power.iter().enumerate() {
            if v > best_val {
                best = idx;
                best_val = v;
            }
        }
        tau = taus[best / thetas.len()];
        theta = thetas[best % thetas.len()];
    }
    (tau, theta)
}

/// Least-squares gains `A† target` (ridge-stabilized when `AᴴA` is near-singular).
pub fn ls_gains(dictionary: &Dictionary, target: &[Complex64]) -> Result<Vec<Complex64>> {
    if dictionary.ncols() == 0 {
        return Err(domain("dictionary has no columns"));
    }
    if dictionary.nrows() != target.len() {
        return Err(domain(format!("dictionary has {} rows, target {}", dictionary.nrows(), target.len())));
    }
    let a = &dictionary.atoms;
    let g = a.adjoint() * a;
    let b = a.adjoint() * DVector::from_column_slice(target);
    Ok(solve_hermitian(&g, &b).x.iter().copied().collect())
}

/// `h′ − A β`.
pub fn update_residual(h_prime: &[Complex64], dictionary: &Dictionary, gains: &[Complex64]) -> Result<Vec<Complex64>> {
    if dictionary.ncols() == 0 {
        return Ok(h_prime.to_vec());
    }
    if dictionary.nrows() != h_prime.len() || dictionary.ncols() != gains.len() {
        return Err(domain("dictionary, gains and observation shapes disagree"));
    }
    let fit = &dictionary.atoms * DVector::from_column_slice(gains);
    Ok(h_prime.iter().zip(fit.iter()).map(|(h, f)| h - f).collect())
}

/// Separable LS fit on normalized parameters: returns gains and the residual.
pub(crate) fn ls_fit_normalized(
    us: &[f64],
    vs: &[f64],
    target: &[Complex64],
    cfg: &ChannelConfig,
) -> (Vec<Complex64>, Vec<Complex64>) {
    if us.is_empty() {
        return (Vec::new(), target.to_vec());
    }
    let atoms = AtomSet::from_normalized(us, vs, cfg.m, cfg.n);
    let beta: Vec<Complex64> = solve_hermitian(&atoms.gram(), &atoms.adjoint_apply(target)).x.iter().copied().collect();
    let fit = atoms.apply(&beta);
    let residual = target.iter().zip(&fit).map(|(h, f)| h - f).collect();
    (beta, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_atom, PathSet};

    fn cfg() -> ChannelConfig {
        ChannelConfig::new(8, 6, 1.0e5, 0).unwrap()
    }

    fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
        a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
    }

    #[test]
    fn standard_grid_layout() {
        let c = cfg();
        let g = GridSpec::standard(&c);
        assert_eq!(g.delay_points.len(), 8);
        assert_eq!(g.angle_points.len(), 6);
        assert_eq!(g.angle_points[0], -0.5);
        assert!(g.angle_points.iter().all(|&t| (-0.5..0.5).contains(&t)));
        assert!((g.delay_points[7] + g.delay_step - 1.0 / c.delta_f).abs() < 1e-15);
    }

    #[test]
    fn fft_correlation_matches_naive_on_oversampled_grid() {
        let c = cfg();
        let r: Vec<Complex64> = (0..c.len()).map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos())).collect();
        let mut corr = Correlator::new(&c, 2, 3);
        let fast = corr.correlate(&r);
        let g = corr.grid().clone();
        for (i, &tau) in g.delay_points.iter().enumerate() {
            for (j, &theta) in g.angle_points.iter().enumerate() {
                let naive = inner(&build_atom(tau, theta, &c), &r);
                assert!((fast[i * g.angle_points.len() + j] - naive).norm() < 1e-10 * (1.0 + naive.norm()));
            }
        }
    }

    #[test]
    fn on_grid_atom_selects_itself() {
        let c = cfg();
        let g = GridSpec::standard(&c);
        let r = build_atom(g.delay_points[3], g.angle_points[4], &c);
        let s = coarse_select(&r, &g, &c);
        assert_eq!((s.delay_index, s.angle_index), (3, 4));
        assert!((s.peak - c.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn refine_recovers_level_one_node() {
        let c = cfg();
        let g = GridSpec::standard(&c);
        let spec = RefinementSpec::default();
        let tau = g.delay_points[2] + 3.0 * g.delay_step / 10.0;
        let theta = g.angle_points[1] - 4.0 * g.angle_step / 10.0;
        let r = build_atom(tau, theta, &c);
        let s = coarse_select(&r, &g, &c);
        let (t, th) = local_refine(&r, s.tau, s.theta, &g, &spec, &c);
        assert!((t - tau).abs() < 1e-9 * g.delay_step);
        assert!((th - theta).abs() < 1e-12);
    }

    #[test]
    fn ls_and_residual_basics() {
        let c = cfg();
        let p = PathSet::new(vec![1.3e-6], vec![0.11], vec![Complex64::new(1.0, 0.0)]).unwrap();
        let d = Dictionary::new(&p, &c);
        let target: Vec<Complex64> = d.atoms.column(0).iter().map(|x| x * 2.0).collect();
        let g = ls_gains(&d, &target).unwrap();
        assert!((g[0] - Complex64::new(2.0, 0.0)).norm() < 1e-12);
        let r = update_residual(&target, &d, &g).unwrap();
        assert!(r.iter().all(|x| x.norm() < 1e-10));
        let empty = Dictionary::new(&PathSet::default(), &c);
        assert_eq!(update_residual(&target, &empty, &[]).unwrap(), target);
    }
}
