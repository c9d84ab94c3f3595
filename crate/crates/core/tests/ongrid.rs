mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use qnomp_core::ongrid::{coarse_select, local_refine, ls_gains, update_residual, Correlator, GridSpec, RefinementSpec};
use qnomp_core::{build_atom, synthesize_channel, Dictionary, PathSet};
use rand::Rng;

#[test]
fn standard_grid_layout() {
    let c = cfg(4, 4);
    let g = GridSpec::standard(&c);
    assert_eq!(g.delay_points.len(), 4);
    assert_eq!(g.angle_points, vec![-0.5, -0.25, 0.0, 0.25]);
    assert!((g.delay_points[1] - c.delay_step()).abs() < 1e-20);
    let f = GridSpec::oversampled(&c, 10, 10);
    assert_eq!((f.delay_points.len(), f.angle_points.len()), (40, 40));
}

#[test]
fn fft_correlation_matches_direct_inner_products() {
    let c = cfg(6, 5);
    let mut r = rng(3);
    let res = cgauss(&mut r, 30, 1.0);
    for (p, q) in [(1, 1), (2, 3), (4, 2)] {
        let mut corr = Correlator::new(&c, p, q);
        let out = corr.correlate(&res);
        let g = corr.grid().clone();
        assert_eq!(out.len(), g.delay_points.len() * g.angle_points.len());
        for (i, &t) in g.delay_points.iter().enumerate() {
            for (j, &th) in g.angle_points.iter().enumerate() {
                let want = inner(&naive_atom(t, th, &c), &res);
                assert!((out[i * g.angle_points.len() + j] - want).norm() < 1e-9, "p={p} q={q} i={i} j={j}");
            }
        }
    }
}

#[test]
fn on_grid_atom_is_selected_exactly() {
    let c = cfg(8, 8);
    let g = GridSpec::standard(&c);
    let a = build_atom(g.delay_points[3], g.angle_points[6], &c);
    let s = coarse_select(&a, &g, &c);
    assert_eq!((s.delay_index, s.angle_index), (3, 6));
    assert!((s.peak - 64.0).abs() < 1e-9);
}

#[test]
fn refinement_lands_within_final_resolution() {
    let c = cfg(16, 16);
    let g = GridSpec::standard(&c);
    let spec = RefinementSpec { k1: 10, k2: 10, n_lr: 2 };
    let (tau, theta) = (5.237 * c.delay_step(), 0.1234);
    let a = build_atom(tau, theta, &c);
    let s = coarse_select(&a, &g, &c);
    let (t, th) = local_refine(&a, s.tau, s.theta, &g, &spec, &c);
    let (rt, ra) = spec.final_resolution();
    assert!((t - tau).abs() <= rt * c.delay_step() / 2.0 + 1e-15);
    assert!((th - theta).abs() <= ra * c.angle_step() / 2.0 + 1e-12);
    assert_eq!(spec.final_resolution(), (0.01, 0.01));
    assert!(RefinementSpec { k1: 0, k2: 1, n_lr: 1 }.validate().is_err());
}

#[test]
fn single_level_refinement_is_local_brute_force_argmax() {
    let c = cfg(8, 6);
    let g = GridSpec::standard(&c);
    let spec = RefinementSpec { k1: 4, k2: 3, n_lr: 1 };
    let mut r = rng(8);
    for _ in 0..20 {
        let res = cgauss(&mut r, 48, 1.0);
        let s = coarse_select(&res, &g, &c);
        let (t, th) = local_refine(&res, s.tau, s.theta, &g, &spec, &c);
        let got = inner(&naive_atom(t, th, &c), &res).norm_sqr();
        let mut best = 0.0f64;
        for i in -4i32..=4 {
            for j in -3i32..=3 {
                let tt = s.tau + i as f64 * c.delay_step() / 4.0;
                let aa = s.theta + j as f64 * c.angle_step() / 3.0;
                best = best.max(inner(&naive_atom(tt, aa, &c), &res).norm_sqr());
            }
        }
        assert!((got - best).abs() <= 1e-9 * best);
        assert!(got >= s.peak * s.peak * (1.0 - 1e-12));
    }
}

#[test]
fn ls_gains_solve_normal_equations() {
    let c = cfg(6, 4);
    let mut r = rng(5);
    let ps = PathSet::new(
        (0..3).map(|_| r.random::<f64>() * c.delay_period()).collect(),
        (0..3).map(|_| r.random::<f64>() - 0.5).collect(),
        vec![cn(1.0, 0.0); 3],
    )
    .unwrap();
    let d = Dictionary::new(&ps, &c);
    let y = cgauss(&mut r, 24, 1.0);
    let beta = ls_gains(&d, &y).unwrap();
    let res = update_residual(&y, &d, &beta).unwrap();
    // Residual is orthogonal to every atom.
    for j in 0..3 {
        let col: Vec<Complex64> = d.atoms.column(j).iter().copied().collect();
        assert!(inner(&col, &res).norm() < 1e-9);
    }
    // Independent oracle: QR least squares.
    let qr = d.atoms.clone().qr();
    let qty = qr.q().adjoint() * nalgebra::DVector::from_column_slice(&y);
    let x = qr.r().solve_upper_triangular(&qty).unwrap();
    for j in 0..3 {
        assert!((x[j] - beta[j]).norm() < 1e-9);
    }
    let empty = Dictionary::new(&PathSet::default(), &c);
    assert!(ls_gains(&empty, &y).is_err());
    assert_eq!(update_residual(&y, &empty, &[]).unwrap(), y);
}

#[test]
fn noiseless_fit_recovers_gains() {
    let c = cfg(12, 8);
    let ps = PathSet::new(vec![1e-6, 2.5e-6], vec![0.1, -0.3], vec![cn(1.0, -0.5), cn(-0.2, 0.7)]).unwrap();
    let h = synthesize_channel(&ps, &c);
    let beta = ls_gains(&Dictionary::new(&ps, &c), &h).unwrap();
    for (a, b) in beta.iter().zip(&ps.betas) {
        assert!((a - b).norm() < 1e-10);
    }
}

proptest! {
    #[test]
    fn residual_norm_is_non_increasing_in_support(seed in any::<u64>()) {
        let c = cfg(8, 4);
        let mut r = rng(seed);
        let y = cgauss(&mut r, 32, 1.0);
        let mut ps = PathSet::default();
        let mut last = norm_sqr(&y);
        for _ in 0..5 {
            ps.push(r.random::<f64>() * c.delay_period(), r.random::<f64>() - 0.5, cn(1.0, 0.0));
            let d = Dictionary::new(&ps, &c);
            let beta = ls_gains(&d, &y).unwrap();
            let e = norm_sqr(&update_residual(&y, &d, &beta).unwrap());
            prop_assert!(e <= last * (1.0 + 1e-10));
            last = e;
        }
    }

    #[test]
    fn selection_maximizes_grid_correlation(seed in any::<u64>()) {
        let c = cfg(5, 7);
        let mut r = rng(seed);
        let y = cgauss(&mut r, 35, 1.0);
        let g = GridSpec::oversampled(&c, 2, 2);
        let s = coarse_select(&y, &g, &c);
        let mut best = 0.0f64;
        for &t in &g.delay_points {
            for &a in &g.angle_points {
                best = best.max(inner(&naive_atom(t, a, &c), &y).norm());
            }
        }
        prop_assert!((s.peak - best).abs() < 1e-9 * best);
    }
}
