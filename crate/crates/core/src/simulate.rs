//! Seeded scenario generators and complex Gaussian noise injection.
//!
//! Randomness is drawn from counter-based ChaCha substreams keyed by
//! `(seed, trial, ...)`, so a trial's draws never depend on which other
//! trials ran before it or on which thread ran it.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{norm_sqr, wrap_angle, wrap_delay, ChannelConfig, Observation, PathSet};
use crate::error::{domain, Result};

/// Substream purpose tags.
pub const STREAM_SCENARIO: u64 = 1;
pub const STREAM_NOISE: u64 = 2;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for the stream addressed by `key` under `seed`.
pub fn substream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let stream = key.iter().fold(0x6A09_E667_F3BC_C908u64, |acc, &k| splitmix64(acc ^ splitmix64(k)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Equally spaced discrete paths.
    Multipath,
    /// Clusters of sub-paths sharing a delay and spanning an angular block.
    Clustered,
}

fn default_paths() -> usize {
    7
}
fn default_clusters() -> usize {
    3
}
fn default_subpaths() -> usize {
    5
}

/// Declarative description of a simulated channel family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Delay spacing in units of the DFT delay resolution.
    pub c1: f64,
    /// Angle spacing in units of the DFT angle resolution.
    pub c2: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_clusters")]
    pub n_clusters: usize,
    #[serde(default = "default_subpaths")]
    pub subpaths_per_cluster: usize,
    /// First delay in seconds; drawn per trial when absent.
    #[serde(default)]
    pub base_tau: Option<f64>,
    /// First directional cosine; drawn per trial when absent.
    #[serde(default)]
    pub base_theta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn multipath(c1: f64, c2: f64, n_paths: usize) -> Self {
        Self {
            kind: ScenarioKind::Multipath,
            c1,
            c2,
            n_paths,
            n_clusters: default_clusters(),
            subpaths_per_cluster: default_subpaths(),
            base_tau: None,
            base_theta: None,
            seed: 0,
        }
    }

    pub fn clustered(c1: f64, c2: f64) -> Self {
        Self { kind: ScenarioKind::Clustered, ..Self::multipath(c1, c2, default_paths()) }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_anchors(mut self, tau: f64, theta: f64) -> Self {
        self.base_tau = Some(tau);
        self.base_theta = Some(theta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(domain(format!("spacings must be positive, got C1={} C2={}", self.c1, self.c2)));
        }
        let counts_ok = match self.kind {
            ScenarioKind::Multipath => self.n_paths >= 1,
            ScenarioKind::Clustered => self.n_clusters >= 1 && self.subpaths_per_cluster >= 1,
        };
        if !counts_ok {
            return Err(domain("path counts must be at least one"));
        }
        Ok(())
    }

    /// Draw the path set for one trial.
    pub fn generate(&self, cfg: &ChannelConfig, trial: u64) -> Result<PathSet> {
        self.validate()?;
        let mut rng = substream(self.seed, &[STREAM_SCENARIO, trial]);
        Ok(match self.kind {
            ScenarioKind::Multipath => draw_multipath(self, cfg, &mut rng),
            ScenarioKind::Clustered => draw_clustered(self, cfg, &mut rng),
        })
    }
}

fn unit_phase(rng: &mut impl Rng) -> Complex64 {
    let phi: f64 = rng.random();
    Complex64::from_polar(1.0, 2.0 * PI * phi)
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if hi > lo {
        lo + (hi - lo) * u
    } else {
        lo
    }
}

/// Anchors keeping the whole constellation inside one period before wrapping.
fn draw_anchors(
    spec: &ScenarioSpec,
    cfg: &ChannelConfig,
    delays: usize,
    angle_steps: f64,
    angle_lead: f64,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let dt = cfg.delay_step();
    let da = cfg.angle_step();
    let tau_lo = 2.0 * dt;
    let tau_hi = cfg.delay_period() - (delays as f64 + 2.0) * spec.c1 * dt;
    let tau = uniform_in(rng, tau_lo, tau_hi);
    let th_lo = -0.5 + 2.0 * da + angle_lead;
    let th_hi = 0.5 - (angle_steps + 3.0) * spec.c2 * da - angle_lead;
    let theta = uniform_in(rng, th_lo, th_hi);
    (spec.base_tau.unwrap_or(tau), spec.base_theta.unwrap_or(theta))
}

fn draw_multipath(spec: &ScenarioSpec, cfg: &ChannelConfig, rng: &mut impl Rng) -> PathSet {
    let l = spec.n_paths;
    let (tau0, theta0) = draw_anchors(spec, cfg, l, (l - 1) as f64, 0.0, rng);
    let mut ps = PathSet::default();
    for k in 0..l {
        let tau = tau0 + k as f64 * spec.c1 * cfg.delay_step();
        let theta = theta0 + k as f64 * spec.c2 * cfg.angle_step();
        ps.push(wrap_delay(tau, cfg.delay_period()), wrap_angle(theta), unit_phase(rng));
    }
    ps
}

fn draw_clustered(spec: &ScenarioSpec, cfg: &ChannelConfig, rng: &mut impl Rng) -> PathSet {
    let nc = spec.n_clusters;
    let sp = spec.subpaths_per_cluster;
    let half = (sp / 2) as f64;
    // Adjacent clusters are separated by one full block width.
    let center_steps = sp as f64;
    let lead = half * spec.c2 * cfg.angle_step();
    let (tau0, theta0) =
        draw_anchors(spec, cfg, nc, center_steps * (nc - 1) as f64 + half, lead, rng);
    let mut ps = PathSet::default();
    for i in 0..nc {
        let tau = wrap_delay(tau0 + i as f64 * spec.c1 * cfg.delay_step(), cfg.delay_period());
        let center = theta0 + i as f64 * center_steps * spec.c2 * cfg.angle_step();
        for j in 0..sp {
            let offset = j as f64 - half;
            let theta = center + offset * spec.c2 * cfg.angle_step();
            ps.push(tau, wrap_angle(theta), unit_phase(rng));
        }
    }
    ps
}

/// Equally spaced multipath constellation drawn from the scenario's seed (trial 0).
pub fn gen_multipath(spec: &ScenarioSpec, cfg: &ChannelConfig) -> Result<PathSet> {
    if spec.kind != ScenarioKind::Multipath {
        return Err(domain("gen_multipath requires a multipath scenario"));
    }
    spec.generate(cfg, 0)
}

/// Clustered constellation drawn from the scenario's seed (trial 0).
pub fn gen_clustered(spec: &ScenarioSpec, cfg: &ChannelConfig) -> Result<PathSet> {
    if spec.kind != ScenarioKind::Clustered {
        return Err(domain("gen_clustered requires a clustered scenario"));
    }
    spec.generate(cfg, 0)
}

/// Ground truth, its noisy observation and the realized SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub truth: Vec<Complex64>,
    pub observation: Observation,
    /// `‖h‖² / (σ² N M)`; infinite when `σ² = 0`.
    pub snr_linear: f64,
}

/// Noise variance giving the target SNR (dB) for this channel.
pub fn sigma2_for_snr(h: &[Complex64], snr_db: f64) -> f64 {
    norm_sqr(h) / (10f64.powf(snr_db / 10.0) * h.len() as f64)
}

/// Add circularly-symmetric complex Gaussian noise of per-entry variance `sigma2`.
pub fn add_noise(h: &[Complex64], sigma2: f64, seed: u64) -> Result<NoisySample> {
    let mut rng = substream(seed, &[STREAM_NOISE]);
    add_noise_with(h, sigma2, &mut rng)
}

pub fn add_noise_with(h: &[Complex64], sigma2: f64, rng: &mut impl Rng) -> Result<NoisySample> {
    if !(sigma2 >= 0.0) {
        return Err(domain(format!("noise variance must be nonnegative, got {sigma2}")));
    }
    let s = (sigma2 / 2.0).sqrt();
    let h_prime: Vec<Complex64> = h
        .iter()
        .map(|&x| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            x + Complex64::new(s * re, s * im)
        })
        .collect();
    let snr_linear = if sigma2 == 0.0 {
        f64::INFINITY
    } else {
        norm_sqr(h) / (sigma2 * h.len() as f64)
    };
    Ok(NoisySample {
        truth: h.to_vec(),
        observation: Observation { h_prime, sigma2 },
        snr_linear,
    })
}
