mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use qnomp_core::channel::{delay_nmse_with, wrap_angle, wrap_delay, DelayMatching};
use qnomp_core::{
    build_atom, build_freq_atom, channel_nmse, delay_nmse, synthesize_band, synthesize_channel, Band, ChannelConfig,
    Dictionary, Observation, PathSet,
};

#[test]
fn atom_matches_direct_formula() {
    let c = cfg(8, 4);
    let a = build_atom(1.37e-6, 0.123, &c);
    let b = naive_atom(1.37e-6, 0.123, &c);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).norm() < 1e-12);
    }
}

#[test]
fn unit_gain_single_path_channel_is_its_atom() {
    let c = cfg(16, 8);
    let ps = PathSet::new(vec![0.7e-6], vec![-0.21], vec![cn(1.0, 0.0)]).unwrap();
    let h = synthesize_channel(&ps, &c);
    let a = build_atom(0.7e-6, -0.21, &c);
    assert_eq!(h, a);
}

#[test]
fn extrapolation_band_continues_the_pilot_ramp() {
    let c = ChannelConfig::new(8, 2, 240e3, 3).unwrap();
    let tau = 2.3e-6;
    let e = build_freq_atom(tau, &c, Band::Extrapolation);
    assert_eq!(e.len(), 24);
    for (i, x) in e.iter().enumerate() {
        let k = (c.m + i) as f64;
        let want = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * k * c.delta_f * tau);
        assert!((x - want).norm() < 1e-11);
    }
    let ps = PathSet::new(vec![tau], vec![0.1], vec![cn(0.5, -1.0)]).unwrap();
    assert_eq!(synthesize_band(&ps, &c, Band::Extrapolation).len(), 24 * 2);
}

#[test]
fn dictionary_columns_are_atoms() {
    let c = cfg(6, 5);
    let ps = PathSet::new(vec![1e-7, 3e-6], vec![0.4, -0.05], vec![cn(1.0, 0.0); 2]).unwrap();
    let d = Dictionary::new(&ps, &c);
    assert_eq!((d.nrows(), d.ncols()), (30, 2));
    for j in 0..2 {
        let a = naive_atom(ps.taus[j], ps.thetas[j], &c);
        for (x, y) in d.atoms.column(j).iter().zip(&a) {
            assert!((x - y).norm() < 1e-12);
        }
    }
}

#[test]
fn nmse_examples() {
    let h = vec![cn(1.0, 0.0), cn(0.0, 1.0)];
    assert_eq!(channel_nmse(&h, &h).unwrap(), 0.0);
    let z = vec![cn(0.0, 0.0); 2];
    assert!((channel_nmse(&h, &z).unwrap() - 1.0).abs() < 1e-15);
    assert!(channel_nmse(&z, &h).is_err());
    assert!(channel_nmse(&h, &h[..1]).is_err());
}

#[test]
fn delay_nmse_examples() {
    let d = 1.0;
    assert_eq!(delay_nmse(&[1.0, 2.0], &[1.0, 2.0], d).unwrap(), 0.0);
    // Both true delays take the single estimate: (0.5² + 0.5²)/2.
    assert!((delay_nmse(&[1.0, 2.0], &[1.5], d).unwrap() - 0.25).abs() < 1e-15);
    // Greedy one-to-one pairs 1.0↔1.1 first, then 2.0↔3.0.
    let v = delay_nmse_with(&[1.0, 2.0], &[1.1, 3.0], d, DelayMatching::OneToOne, None).unwrap();
    assert!((v - (0.01 + 1.0) / 2.0).abs() < 1e-12);
    // Circular distance through the period.
    let v = delay_nmse_with(&[0.1], &[9.9], d, DelayMatching::NearestWithReplacement, Some(10.0)).unwrap();
    assert!((v - 0.04).abs() < 1e-12);
    assert!(delay_nmse(&[], &[1.0], d).is_err());
    assert!(delay_nmse(&[1.0], &[], d).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(ChannelConfig::new(0, 4, 1.0, 0).is_err());
    assert!(ChannelConfig::new(4, 4, -1.0, 0).is_err());
    assert!(PathSet::new(vec![0.0], vec![], vec![]).is_err());
    let c = cfg(4, 4);
    assert!(Observation::new(vec![cn(0.0, 0.0); 15], 1.0, &c).is_err());
    assert!(Observation::new(vec![cn(0.0, 0.0); 16], -1.0, &c).is_err());
}

#[test]
fn sigma2_floor_applies_to_noiseless_observations() {
    let c = cfg(4, 4);
    let obs = Observation::new(vec![cn(2.0, 0.0); 16], 0.0, &c).unwrap();
    assert!((obs.effective_sigma2() - 4e-12).abs() < 1e-24);
    let obs = Observation::new(vec![cn(2.0, 0.0); 16], 0.3, &c).unwrap();
    assert_eq!(obs.effective_sigma2(), 0.3);
}

proptest! {
    #[test]
    fn atom_norm_is_nm(tau in 0.0f64..1e-5, theta in -0.5f64..0.5, m in 1usize..20, n in 1usize..12) {
        let c = ChannelConfig::new(m, n, 240e3, 0).unwrap();
        let a = build_atom(tau, theta, &c);
        prop_assert!((norm_sqr(&a) - (m * n) as f64).abs() < 1e-9);
    }

    #[test]
    fn atoms_are_periodic(tau in 0.0f64..4e-6, theta in -0.5f64..0.5, shift in -3i32..3) {
        let c = cfg(12, 6);
        let a = build_atom(tau, theta, &c);
        let b = build_atom(tau + shift as f64 * c.delay_period(), theta + shift as f64, &c);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).norm() < 1e-9);
        }
        let w = build_atom(wrap_delay(tau + c.delay_period(), c.delay_period()), wrap_angle(theta + 1.0), &c);
        for (x, y) in a.iter().zip(&w) {
            prop_assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn wrapped_values_stay_in_range(t in -1e3f64..1e3, p in 0.1f64..10.0) {
        let w = wrap_angle(t);
        prop_assert!((-0.5..0.5).contains(&w));
        prop_assert!(((w - t) - (w - t).round()).abs() < 1e-9);
        let d = wrap_delay(t, p);
        prop_assert!((0.0..p).contains(&d));
    }

    #[test]
    fn synthesis_is_linear_and_matches_direct_sum(
        seed in any::<u64>(), l in 1usize..5, s in -3.0f64..3.0,
    ) {
        let c = cfg(8, 6);
        let mut r = rng(seed);
        use rand::Rng;
        let taus: Vec<f64> = (0..l).map(|_| r.random::<f64>() * c.delay_period()).collect();
        let thetas: Vec<f64> = (0..l).map(|_| r.random::<f64>() - 0.5).collect();
        let b1: Vec<Complex64> = (0..l).map(|_| cn(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect();
        let b2: Vec<Complex64> = (0..l).map(|_| cn(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect();
        let p1 = PathSet::new(taus.clone(), thetas.clone(), b1.clone()).unwrap();
        let p2 = PathSet::new(taus.clone(), thetas.clone(), b2.clone()).unwrap();
        let mix: Vec<Complex64> = b1.iter().zip(&b2).map(|(x, y)| x * s + y).collect();
        let pm = PathSet::new(taus.clone(), thetas.clone(), mix.clone()).unwrap();
        let h1 = synthesize_channel(&p1, &c);
        let h2 = synthesize_channel(&p2, &c);
        let hm = synthesize_channel(&pm, &c);
        let direct = naive_channel(&taus, &thetas, &mix, &c);
        for i in 0..hm.len() {
            prop_assert!((hm[i] - (h1[i] * s + h2[i])).norm() < 1e-9);
            prop_assert!((hm[i] - direct[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn nmse_is_scale_invariant(seed in any::<u64>(), s in 0.1f64..10.0) {
        let mut r = rng(seed);
        let t = cgauss(&mut r, 20, 1.0);
        let e = cgauss(&mut r, 20, 1.0);
        let a = channel_nmse(&t, &e).unwrap();
        let ts: Vec<Complex64> = t.iter().map(|x| x * s).collect();
        let es: Vec<Complex64> = e.iter().map(|x| x * s).collect();
        prop_assert!((channel_nmse(&ts, &es).unwrap() - a).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }
}
