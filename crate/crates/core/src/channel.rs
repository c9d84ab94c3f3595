//! Channel geometry, atoms, multipath synthesis and error metrics.
//!
//! A channel snapshot is stored subcarrier-major: entry `k * n + a` holds
//! subcarrier `k`, antenna `a`. Every atom is the Kronecker product of a
//! frequency response vector and a ULA steering vector in that order, so
//! the same indexing applies to dictionaries and residuals.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Relative floor applied to the noise variance when it is zero (noiseless inputs).
pub const SIGMA2_FLOOR_REL: f64 = 1e-12;

/// Static dimensions of the pilot observation and extrapolation target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Pilot subcarriers.
    pub m: usize,
    /// ULA antennas.
    pub n: usize,
    /// Subcarrier spacing in Hz.
    pub delta_f: f64,
    /// Number of M-wide bands extrapolated beyond the pilots.
    #[serde(default)]
    pub k: usize,
}

impl ChannelConfig {
    pub fn new(m: usize, n: usize, delta_f: f64, k: usize) -> Result<Self> {
        let cfg = Self { m, n, delta_f, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(domain("channel needs at least one subcarrier and one antenna"));
        }
        if !(self.delta_f.is_finite() && self.delta_f > 0.0) {
            return Err(domain(format!("subcarrier spacing must be positive, got {}", self.delta_f)));
        }
        Ok(())
    }

    pub fn with_bands(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    /// Delay resolution of the M-point DFT grid, `1 / (M Δf)`.
    pub fn delay_step(&self) -> f64 {
        1.0 / (self.m as f64 * self.delta_f)
    }

    /// Angular resolution of the N-point DFT grid, `1 / N`.
    pub fn angle_step(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Period of the pilot frequency atoms in delay, `1 / Δf`.
    pub fn delay_period(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// Length `N·M` of a pilot-band channel vector.
    pub fn len(&self) -> usize {
        self.n * self.m
    }

    /// Number of subcarriers in the extrapolation bands, `K·M`.
    pub fn extrapolation_subcarriers(&self) -> usize {
        self.k * self.m
    }
}

/// Wrap a directional cosine into `[-1/2, 1/2)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta - (theta + 0.5).floor();
    if w >= 0.5 {
        w - 1.0
    } else {
        w
    }
}

/// Wrap a delay into `[0, period)`.
pub fn wrap_delay(tau: f64, period: f64) -> f64 {
    let w = tau.rem_euclid(period);
    if w >= period {
        0.0
    } else {
        w
    }
}

/// Delays, directional cosines and complex gains of a multipath channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathSet {
    pub taus: Vec<f64>,
    pub thetas: Vec<f64>,
    pub betas: Vec<Complex64>,
}

impl PathSet {
    pub fn new(taus: Vec<f64>, thetas: Vec<f64>, betas: Vec<Complex64>) -> Result<Self> {
        if taus.len() != thetas.len() || taus.len() != betas.len() {
            return Err(domain(format!(
                "path vectors disagree in length: {} delays, {} angles, {} gains",
                taus.len(),
                thetas.len(),
                betas.len()
            )));
        }
        Ok(Self { taus, thetas, betas })
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn push(&mut self, tau: f64, theta: f64, beta: Complex64) {
        self.taus.push(tau);
        self.thetas.push(theta);
        self.betas.push(beta);
    }

    /// Copy with every parameter wrapped into its canonical period.
    pub fn canonical(&self, cfg: &ChannelConfig) -> Self {
        let period = cfg.delay_period();
        Self {
            taus: self.taus.iter().map(|&t| wrap_delay(t, period)).collect(),
            thetas: self.thetas.iter().map(|&t| wrap_angle(t)).collect(),
            betas: self.betas.clone(),
        }
    }

    /// `|β_i|²` per path.
    pub fn energies(&self) -> Vec<f64> {
        self.betas.iter().map(|b| b.norm_sqr()).collect()
    }

    /// Permutation ordering paths by descending `|β|`, ties by original index.
    pub fn gain_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.betas[b]
                .norm_sqr()
                .partial_cmp(&self.betas[a].norm_sqr())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            taus: order.iter().map(|&i| self.taus[i]).collect(),
            thetas: order.iter().map(|&i| self.thetas[i]).collect(),
            betas: order.iter().map(|&i| self.betas[i]).collect(),
        }
    }
}

/// Noisy least-squares channel `h' = h + w'` with known per-entry noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub h_prime: Vec<Complex64>,
    pub sigma2: f64,
}

impl Observation {
    pub fn new(h_prime: Vec<Complex64>, sigma2: f64, cfg: &ChannelConfig) -> Result<Self> {
        if h_prime.len() != cfg.len() {
            return Err(domain(format!(
                "observation has {} entries, expected N·M = {}",
                h_prime.len(),
                cfg.len()
            )));
        }
        if !(sigma2 >= 0.0) {
            return Err(domain(format!("noise variance must be nonnegative, got {sigma2}")));
        }
        Ok(Self { h_prime, sigma2 })
    }

    /// Noise variance used inside losses and tests: `max(σ², 1e-12·‖h'‖²/len)`.
    pub fn effective_sigma2(&self) -> f64 {
        let floor = SIGMA2_FLOOR_REL * norm_sqr(&self.h_prime) / self.h_prime.len().max(1) as f64;
        self.sigma2.max(floor).max(f64::MIN_POSITIVE)
    }
}

/// Which frequencies a delay atom samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    /// Pilot subcarriers `f_k = k Δf`, `k = 0..M`.
    Pilot,
    /// One-sided extrapolation bands `f_k = (M + k) Δf`, `k = 0..K·M`.
    Extrapolation,
}

/// `exp(-j2π·step·(start + i))` for `i = 0..len`.
pub(crate) fn exp_ramp(step: f64, start: usize, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|i| Complex64::from_polar(1.0, -2.0 * PI * step * (start + i) as f64))
        .collect()
}

/// Frequency response `a_τ(τ)` over the pilot band or the extrapolation bands.
pub fn build_freq_atom(tau: f64, cfg: &ChannelConfig, band: Band) -> Vec<Complex64> {
    let step = tau * cfg.delta_f;
    match band {
        Band::Pilot => exp_ramp(step, 0, cfg.m),
        Band::Extrapolation => exp_ramp(step, cfg.m, cfg.k * cfg.m),
    }
}

/// ULA steering vector `a_θ(θ)` with entries `exp(-j2π n θ)`.
pub fn build_steering_atom(theta: f64, cfg: &ChannelConfig) -> Vec<Complex64> {
    exp_ramp(theta, 0, cfg.n)
}

/// Kronecker product `a ⊗ b` (the index of `b` runs fastest).
pub fn kron(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|&y| x * y));
    }
    out
}

/// Pilot-band space-frequency atom `a_τ(τ) ⊗ a_θ(θ)`.
pub fn build_atom(tau: f64, theta: f64, cfg: &ChannelConfig) -> Vec<Complex64> {
    kron(&build_freq_atom(tau, cfg, Band::Pilot), &build_steering_atom(theta, cfg))
}

/// Sensing matrix with one atom per (τ, θ) pair.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub atoms: DMatrix<Complex64>,
    pub source_params: PathSet,
}

impl Dictionary {
    /// Pilot-band dictionary for the delays and angles of `params` (gains ignored).
    pub fn new(params: &PathSet, cfg: &ChannelConfig) -> Self {
        Self::for_band(params, cfg, Band::Pilot)
    }

    pub fn for_band(params: &PathSet, cfg: &ChannelConfig, band: Band) -> Self {
        let rows = match band {
            Band::Pilot => cfg.len(),
            Band::Extrapolation => cfg.n * cfg.extrapolation_subcarriers(),
        };
        let mut atoms = DMatrix::zeros(rows, params.len());
        for (j, (&tau, &theta)) in params.taus.iter().zip(&params.thetas).enumerate() {
            let col = kron(&build_freq_atom(tau, cfg, band), &build_steering_atom(theta, cfg));
            atoms.column_mut(j).copy_from_slice(&col);
        }
        Self { atoms, source_params: params.clone() }
    }

    pub fn ncols(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.atoms.nrows()
    }
}

/// `h = A(τ, θ) β` on the pilot band.
pub fn synthesize_channel(paths: &PathSet, cfg: &ChannelConfig) -> Vec<Complex64> {
    synthesize_band(paths, cfg, Band::Pilot)
}

/// Multipath model evaluated on the requested band, subcarrier-major.
pub fn synthesize_band(paths: &PathSet, cfg: &ChannelConfig, band: Band) -> Vec<Complex64> {
    let rows = match band {
        Band::Pilot => cfg.m,
        Band::Extrapolation => cfg.extrapolation_subcarriers(),
    };
    let mut h = vec![Complex64::new(0.0, 0.0); rows * cfg.n];
    for i in 0..paths.len() {
        let ft = build_freq_atom(paths.taus[i], cfg, band);
        let st = build_steering_atom(paths.thetas[i], cfg);
        let beta = paths.betas[i];
        for (k, &f) in ft.iter().enumerate() {
            let fb = f * beta;
            let row = &mut h[k * cfg.n..(k + 1) * cfg.n];
            for (x, &s) in row.iter_mut().zip(&st) {
                *x += fb * s;
            }
        }
    }
    h
}

pub(crate) fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// `‖truth − estimate‖² / ‖truth‖²`.
pub fn channel_nmse(truth: &[Complex64], estimate: &[Complex64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(domain(format!(
            "length mismatch: truth {} vs estimate {}",
            truth.len(),
            estimate.len()
        )));
    }
    let denom = norm_sqr(truth);
    if denom == 0.0 {
        return Err(domain("channel NMSE undefined for an all-zero truth"));
    }
    let num: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(num / denom)
}

/// How estimated delays are paired with true delays in [`delay_nmse_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelayMatching {
    /// Each true delay takes its closest estimate; estimates may be reused.
    #[default]
    NearestWithReplacement,
    /// Greedy globally-closest pairing without reuse; true delays left over
    /// once the estimates are exhausted fall back to their nearest estimate.
    OneToOne,
}

/// Delay NMSE `Σ (τ − τ̂)² / (L Δ²)` with nearest-with-replacement matching.
pub fn delay_nmse(true_taus: &[f64], est_taus: &[f64], dft_resolution: f64) -> Result<f64> {
    delay_nmse_with(true_taus, est_taus, dft_resolution, DelayMatching::default(), None)
}

/// Delay NMSE with a chosen matching rule; `period` makes distances circular.
pub fn delay_nmse_with(
    true_taus: &[f64],
    est_taus: &[f64],
    dft_resolution: f64,
    matching: DelayMatching,
    period: Option<f64>,
) -> Result<f64> {
    if true_taus.is_empty() {
        return Err(domain("delay NMSE needs at least one true delay"));
    }
    if est_taus.is_empty() {
        return Err(domain("delay NMSE needs at least one estimated delay"));
    }
    if !(dft_resolution > 0.0) {
        return Err(domain("DFT resolution must be positive"));
    }
    let dist = |a: f64, b: f64| {
        let d = a - b;
        match period {
            Some(p) => {
                let w = d.rem_euclid(p);
                w.min(p - w)
            }
            None => d.abs(),
        }
    };
    let nearest = |t: f64| est_taus.iter().map(|&e| dist(t, e)).fold(f64::INFINITY, f64::min);
    let total: f64 = match matching {
        DelayMatching::NearestWithReplacement => true_taus.iter().map(|&t| nearest(t).powi(2)).sum(),
        DelayMatching::OneToOne => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (i, &t) in true_taus.iter().enumerate() {
                for (j, &e) in est_taus.iter().enumerate() {
                    pairs.push((dist(t, e), i, j));
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut err = vec![None; true_taus.len()];
            let mut used = vec![false; est_taus.len()];
            for (d, i, j) in pairs {
                if err[i].is_none() && !used[j] {
                    err[i] = Some(d);
                    used[j] = true;
                }
            }
            err.iter()
                .zip(true_taus)
                .map(|(e, &t)| e.unwrap_or_else(|| nearest(t)).powi(2))
                .sum()
        }
    };
    Ok(total / (true_taus.len() as f64 * dft_resolution * dft_resolution))
}
