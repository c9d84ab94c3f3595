//! Angular block expansion of estimated paths and two-pass regularized LMMSE gains.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{wrap_angle, ChannelConfig, Observation, PathSet};
use crate::error::{domain, Result};
use crate::linalg::{solve_hermitian, AtomSet};

/// Relative floor on sub-path prior energies.
pub const ENERGY_FLOOR_REL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    /// Sub-paths on each side of the parent angle.
    pub gamma: usize,
    /// Angular spacing of sub-paths in units of `1/N`.
    pub spacing: f64,
    /// Fraction of total energy left outside the expanded set.
    pub epsilon: f64,
    /// Accepted in configs for completeness; unused.
    pub epsilon1: Option<f64>,
    /// Accepted in configs for completeness; unused.
    pub epsilon2: Option<f64>,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { gamma: 4, spacing: 1.0, epsilon: 0.0, epsilon1: None, epsilon2: None }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) {
            return Err(domain(format!("block spacing must be positive, got {}", self.spacing)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(domain(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Sub-path angular step `Δ_θ` for this channel.
    pub fn delta_theta(&self, cfg: &ChannelConfig) -> f64 {
        self.spacing * cfg.angle_step()
    }
}

/// Expanded sub-paths with their prior energies and, after [`reweight`], gains.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubPathSet {
    pub taus: Vec<f64>,
    pub thetas: Vec<f64>,
    pub energies: Vec<f64>,
    /// Index of the parent path in the input `PathSet`.
    pub origin: Vec<usize>,
    pub gains: Vec<Complex64>,
}

impl SubPathSet {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// Sub-paths as a multipath channel (zero gains before reweighting).
    pub fn to_paths(&self) -> PathSet {
        let betas = if self.gains.len() == self.len() { self.gains.clone() } else { vec![Complex64::new(0.0, 0.0); self.len()] };
        PathSet { taus: self.taus.clone(), thetas: self.thetas.clone(), betas }
    }

    fn push(&mut self, tau: f64, theta: f64, energy: f64, origin: usize) {
        self.taus.push(tau);
        self.thetas.push(theta);
        self.energies.push(energy);
        self.origin.push(origin);
    }
}

/// Indices of the high-energy set: the shortest prefix (in descending `|β|`) holding
/// more than `(1 − ε)` of the total energy; `ε = 0` selects every path.
pub fn high_energy_set(paths: &PathSet, epsilon: f64) -> Vec<usize> {
    let order = paths.gain_order();
    let energies = paths.energies();
    let total: f64 = energies.iter().sum();
    if epsilon == 0.0 || total == 0.0 {
        return order;
    }
    let mut cum = 0.0;
    let mut out = Vec::new();
    for &i in &order {
        out.push(i);
        cum += energies[i];
        if cum > (1.0 - epsilon) * total {
            break;
        }
    }
    out
}

/// Expand high-energy paths into `2γ+1` sub-paths at `θᵢ + jΔ_θ` sharing `|βᵢ|²` equally.
pub fn expand_blocks(paths: &PathSet, bcfg: &BlockConfig, cfg: &ChannelConfig) -> Result<SubPathSet> {
    bcfg.validate()?;
    let high = high_energy_set(paths, bcfg.epsilon);
    let mut is_high = vec![false; paths.len()];
    for &i in &high {
        is_high[i] = true;
    }
    let energies = paths.energies();
    let width = 2 * bcfg.gamma + 1;
    let dth = bcfg.delta_theta(cfg);
    let g = bcfg.gamma as i64;
    let mut out = SubPathSet::default();
    for i in paths.gain_order() {
        if is_high[i] {
            for j in -g..=g {
                out.push(paths.taus[i], wrap_angle(paths.thetas[i] + j as f64 * dth), energies[i] / width as f64, i);
            }
        } else {
            out.push(paths.taus[i], paths.thetas[i], energies[i], i);
        }
    }
    Ok(out)
}

fn floored(e: &[f64]) -> Vec<f64> {
    let max = e.iter().copied().fold(0.0, f64::max);
    let floor = if max > 0.0 { ENERGY_FLOOR_REL * max } else { 1.0 };
    e.iter().map(|&v| v.max(floor)).collect()
}

/// `(AᴴA + σ² diag(e)⁻¹)⁻¹ Aᴴ h′` for the sub-path dictionary.
fn lmmse(atoms: &AtomSet, rhs: &nalgebra::DVector<Complex64>, sigma2: f64, e: &[f64]) -> Vec<Complex64> {
    let mut g = atoms.gram();
    for (i, v) in e.iter().enumerate() {
        g[(i, i)] += Complex64::new(sigma2 / v, 0.0);
    }
    solve_hermitian(&g, rhs).x.iter().copied().collect()
}

/// Two regularized LMMSE passes: first with the block energies as prior, then with the
/// first-pass gain energies.
pub fn reweight(subs: &SubPathSet, obs: &Observation, cfg: &ChannelConfig) -> Result<SubPathSet> {
    if subs.is_empty() {
        return Err(domain("reweighting needs at least one sub-path"));
    }
    if obs.h_prime.len() != cfg.len() {
        return Err(domain("observation length does not match the channel"));
    }
    let dt = cfg.delay_step();
    let us: Vec<f64> = subs.taus.iter().map(|t| t / dt).collect();
    let vs: Vec<f64> = subs.thetas.iter().map(|t| t * cfg.n as f64).collect();
    let atoms = AtomSet::from_normalized(&us, &vs, cfg.m, cfg.n);
    let rhs = atoms.adjoint_apply(&obs.h_prime);
    let sigma2 = obs.effective_sigma2();
    let first = lmmse(&atoms, &rhs, sigma2, &floored(&subs.energies));
    let e_h = floored(&first.iter().map(|h| h.norm_sqr()).collect::<Vec<_>>());
    let gains = lmmse(&atoms, &rhs, sigma2, &e_h);
    Ok(SubPathSet { gains, ..subs.clone() })
}

/// Expansion followed by reweighting.
pub fn block_estimate(paths: &PathSet, obs: &Observation, cfg: &ChannelConfig, bcfg: &BlockConfig) -> Result<SubPathSet> {
    if paths.is_empty() {
        return Ok(SubPathSet::default());
    }
    reweight(&expand_blocks(paths, bcfg, cfg)?, obs, cfg)
}
