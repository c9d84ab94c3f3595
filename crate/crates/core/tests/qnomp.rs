mod common;

use common::*;
use proptest::prelude::*;
use qnomp_core::ongrid::Correlator;
use qnomp_core::simulate::{add_noise, sigma2_for_snr, ScenarioSpec};
use qnomp_core::{
    cfar_threshold, channel_nmse, extrapolate_plugin, qnomp_run, synthesize_band, synthesize_channel, Band, ChannelConfig,
    Observation, PathSet, QnompConfig,
};

fn scenario_obs(c: &ChannelConfig, seed: u64, snr_db: f64) -> (PathSet, Observation) {
    let ps = ScenarioSpec::multipath(2.0, 1.0, 3).with_seed(seed).generate(c, 0).unwrap();
    let h = synthesize_channel(&ps, c);
    let s = add_noise(&h, sigma2_for_snr(&h, snr_db), seed).unwrap();
    (ps, s.observation)
}

#[test]
fn threshold_formula_example() {
    let c = ChannelConfig::new(16, 16, 1.0, 0).unwrap();
    let t = cfar_threshold(&c, 2.0, 0.1).unwrap();
    let nm = 256.0f64;
    let want = nm * 2.0 * (nm.ln() - (-(0.9f64).ln()).ln());
    assert!((t - want).abs() < 1e-9 * want);
    assert!(cfar_threshold(&c, 0.0, 0.1).is_err());
}

#[test]
fn runs_are_deterministic() {
    let c = cfg(16, 16);
    let (_, obs) = scenario_obs(&c, 7, 10.0);
    let q = QnompConfig::default();
    assert_eq!(qnomp_run(&obs, &c, &q).unwrap(), qnomp_run(&obs, &c, &q).unwrap());
}

#[test]
fn noiseless_off_grid_path_is_recovered() {
    let c = cfg(16, 16);
    let ps = PathSet::new(vec![3.37 * c.delay_step()], vec![0.0712], vec![cn(0.6, -0.8)]).unwrap();
    let h = synthesize_channel(&ps, &c);
    let obs = Observation::new(h.clone(), 0.0, &c).unwrap();
    let res = qnomp_run(&obs, &c, &QnompConfig::default()).unwrap();
    let hhat = synthesize_channel(&res.paths, &c);
    assert!(channel_nmse(&h, &hhat).unwrap() < 1e-10);
    assert!((res.paths.taus[0] - ps.taus[0]).abs() < 1e-6 * c.delay_step());
}

#[test]
fn noise_only_false_alarm_rate_is_calibrated() {
    let c = cfg(8, 8);
    let q = QnompConfig { n_out: 0, n_in: 0, ..QnompConfig::default() };
    let trials = 500;
    let mut detections = 0;
    for t in 0..trials {
        let mut r = rng(1000 + t);
        let obs = Observation::new(cgauss(&mut r, 64, 1.0), 1.0, &c).unwrap();
        let res = qnomp_run(&obs, &c, &q).unwrap();
        if res.n_paths() > 0 {
            detections += 1;
        }
    }
    // Mean 5 under p_fa = 0.01; 15 is more than four standard deviations out.
    assert!(detections <= 15, "{detections} false alarms in {trials} trials");
}

#[test]
fn plugin_with_no_extra_bands_is_empty() {
    let c = cfg(8, 8).with_bands(0);
    let (_, obs) = scenario_obs(&c, 3, 20.0);
    let res = qnomp_run(&obs, &c, &QnompConfig::default()).unwrap();
    assert!(extrapolate_plugin(&res, &c).is_empty());
}

#[test]
fn plugin_evaluates_the_estimated_model() {
    let c = cfg(12, 8);
    let (_, obs) = scenario_obs(&c, 5, 15.0);
    let res = qnomp_run(&obs, &c, &QnompConfig::default()).unwrap();
    let e = extrapolate_plugin(&res, &c);
    assert_eq!(e.len(), 2 * 12 * 8);
    let mut direct = vec![cn(0.0, 0.0); e.len()];
    for i in 0..res.n_paths() {
        for k in 0..24 {
            for a in 0..8 {
                let f = (12 + k) as f64 * c.delta_f;
                let ph = -2.0 * std::f64::consts::PI * (f * res.paths.taus[i] + a as f64 * res.paths.thetas[i]);
                direct[k * 8 + a] += res.paths.betas[i] * num_complex::Complex64::from_polar(1.0, ph);
            }
        }
    }
    for (x, y) in e.iter().zip(&direct) {
        assert!((x - y).norm() < 1e-9);
    }
    assert_eq!(e, synthesize_band(&res.paths, &c, Band::Extrapolation));
}

#[test]
fn path_cap_truncates() {
    let c = cfg(16, 16);
    let (_, obs) = scenario_obs(&c, 2, 30.0);
    let res = qnomp_run(&obs, &c, &QnompConfig { max_paths: 2, ..QnompConfig::default() }).unwrap();
    assert_eq!(res.n_paths(), 2);
    assert!(res.diagnostics.truncated);
}

#[test]
fn invalid_configs_are_rejected() {
    let c = cfg(4, 4);
    let obs = Observation::new(vec![cn(1.0, 0.0); 16], 1.0, &c).unwrap();
    for q in [
        QnompConfig { p_fa: 0.0, ..QnompConfig::default() },
        QnompConfig { max_paths: 0, ..QnompConfig::default() },
        QnompConfig { lambda: Some(-1.0), ..QnompConfig::default() },
    ] {
        assert!(qnomp_run(&obs, &c, &q).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stopping_and_ordering_invariants(seed in any::<u64>(), snr in 0.0f64..25.0) {
        let c = cfg(12, 12);
        let (_, obs) = scenario_obs(&c, seed, snr);
        let q = QnompConfig::default();
        let res = qnomp_run(&obs, &c, &q).unwrap();
        let d = &res.diagnostics;
        prop_assert_eq!(d.residual_norms.len(), d.omp_iterations + 1);
        for w in d.residual_norms.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        // The loop ended because the residual fell below the CFAR threshold.
        if !d.truncated {
            let t = cfar_threshold(&c, obs.effective_sigma2(), q.p_fa).unwrap();
            prop_assert!(Correlator::new(&c, 1, 1).peak_power(&d.pre_joint_residual) <= t);
        }
        let e = res.paths.energies();
        for w in e.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for i in 0..res.n_paths() {
            prop_assert!(res.paths.taus[i] >= 0.0 && res.paths.taus[i] < c.delay_period());
            prop_assert!(res.paths.thetas[i] >= -0.5 && res.paths.thetas[i] < 0.5);
        }
        if let Some(h) = &res.delay_inv_hessian_diag {
            prop_assert_eq!(h.len(), res.n_paths());
        }
    }
}
