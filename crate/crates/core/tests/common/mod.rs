#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use qnomp_core::ChannelConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn cfg(m: usize, n: usize) -> ChannelConfig {
    ChannelConfig::new(m, n, 240e3, 2).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cn(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn unit_phase(rng: &mut impl Rng) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * rng.random::<f64>())
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(v: &[Complex64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// Atom entry written straight from the model: exp(-j2π(k Δf τ + a θ)).
pub fn naive_atom(tau: f64, theta: f64, c: &ChannelConfig) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(c.m * c.n);
    for k in 0..c.m {
        for a in 0..c.n {
            out.push(Complex64::from_polar(1.0, -2.0 * PI * (k as f64 * c.delta_f * tau + a as f64 * theta)));
        }
    }
    out
}

pub fn naive_channel(taus: &[f64], thetas: &[f64], betas: &[Complex64], c: &ChannelConfig) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); c.m * c.n];
    for i in 0..taus.len() {
        for (x, a) in h.iter_mut().zip(naive_atom(taus[i], thetas[i], c)) {
            *x += betas[i] * a;
        }
    }
    h
}

/// Complex Gaussian noise with per-entry variance `sigma2`.
pub fn cgauss(rng: &mut impl Rng, len: usize, sigma2: f64) -> Vec<Complex64> {
    use rand_distr::StandardNormal;
    let s = (sigma2 / 2.0).sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(s * re, s * im)
        })
        .collect()
}
