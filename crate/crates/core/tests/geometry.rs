use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use ricci_lab::analysis::CutoffProfile;
use ricci_lab::curvature::{curvature, scalar_curvature, symmetry_residuals};
use ricci_lab::field::{sym_index, sym_len, ScalarField, SymTensorField};
use ricci_lab::flow::{self, Background, DiagnosticSchedule, FlowParams, FlowState, Tracker};
use ricci_lab::generators::{c0_distance, spike_member, SpikeFamilySpec};
use ricci_lab::grid::PeriodicGrid;
use ricci_lab::harness::rmin_monotonicity;
use ricci_lab::heat::lambert_w0;
use ricci_lab::metric::MetricField;

// R of e^{2u} δ for u = eps sin(2π k x_0 / L), written out by hand.
fn analytic_conformal(x: f64, eps: f64, k: f64, side: f64, n: f64) -> f64 {
    let w = 2.0 * PI * k / side;
    let u = eps * (w * x).sin();
    let du = eps * w * (w * x).cos();
    let d2u = -eps * w * w * (w * x).sin();
    (-2.0 * u).exp() * (-2.0 * (n - 1.0) * d2u - (n - 1.0) * (n - 2.0) * du * du)
}

#[test]
fn conformal_scalar_matches_hand_formula() {
    for (dim, n) in [(2, 32), (3, 24)] {
        let grid = PeriodicGrid::cubic(dim, n, 1.0).unwrap();
        let u = ScalarField::from_fn(&grid, |x, o| o[0] = 0.05 * (2.0 * PI * x[0]).sin());
        let r = scalar_curvature(&MetricField::conformal(&u).unwrap());
        let peak = 4.0 * (dim as f64 - 1.0) * PI * PI * 0.05;
        for p in 0..grid.len() {
            let x = grid.position(p)[0];
            let want = analytic_conformal(x, 0.05, 1.0, 1.0, dim as f64);
            assert!((r.value(p) - want).abs() < 2e-3 * peak, "dim {dim} at {x}");
        }
    }
}

#[test]
fn curvature_tensor_symmetries_hold_for_anisotropic_metric() {
    let grid = PeriodicGrid::cubic(3, 20, 2.0).unwrap();
    let g = MetricField::from_fn(&grid, |x, o| {
        let s = |a: usize| (PI * x[a]).sin();
        o[sym_index(0, 0, 3)] = 1.0 + 0.1 * s(1);
        o[sym_index(1, 1, 3)] = 1.2 + 0.05 * s(2) * s(0);
        o[sym_index(2, 2, 3)] = 0.9 + 0.08 * s(0);
        o[sym_index(0, 1, 3)] = 0.03 * s(2);
        o[sym_index(1, 2, 3)] = 0.02 * s(0);
    })
    .unwrap();
    let res = symmetry_residuals(&g);
    let b = curvature(&g);
    let scale = b.rm_norm.max();
    assert!(scale > 0.0);
    let worst = res.antisymmetry.max(res.pair_symmetry).max(res.bianchi).max(res.ricci_trace);
    assert!(worst < 1e-10 * scale.max(1.0), "{res:?}");
    let r = scalar_curvature(&g);
    assert!(r.max_abs_diff(&b.scalar).unwrap() < 1e-10 * scale);
}

#[test]
fn flat_metric_is_stationary_under_flow() {
    let grid = PeriodicGrid::cubic(3, 12, 3.0).unwrap();
    let g = MetricField::euclidean(&grid);
    let bg = Arc::new(Background::new(g.clone()));
    let mut st = FlowState::new(0.0, g.clone(), bg, Tracker::empty(3)).unwrap();
    let params = FlowParams::default();
    for _ in 0..20 {
        st = st.step(1e-3, &params).unwrap();
    }
    assert_eq!(st.g.base().max_abs_diff(g.base()).unwrap(), 0.0);
}

#[test]
fn spike_flow_raises_minimum_and_conserves_shape() {
    let grid = PeriodicGrid::cubic(3, 16, 4.0).unwrap();
    let mut spec = SpikeFamilySpec::lp(3, 1);
    spec.rho0 = 1.4;
    spec.a0 = 0.3;
    let m = spike_member(&spec, &grid, 1).unwrap();
    let params = FlowParams {
        t_end: 0.02,
        cfl_safety: 0.4,
        ..FlowParams::default()
    };
    let sched = DiagnosticSchedule::log_spaced(1e-3, 0.02, 5).unwrap();
    let traj = flow::run(m.metric, MetricField::euclidean(&grid), &params, &sched, Tracker::empty(3)).unwrap();
    assert_eq!(traj.states.len(), 6);
    let check = rmin_monotonicity(&traj);
    assert!(check.holds, "{check:?}");
    assert!(traj.last().monitors.r_min > traj.initial().monitors.r_min);
    // the spike spreads: bilipschitz factor moves toward 1
    assert!(traj.last().monitors.bilipschitz < traj.initial().monitors.bilipschitz);
}

fn random_metric(grid: &PeriodicGrid, amp: f64, phase: f64) -> MetricField {
    let d = grid.dim();
    MetricField::from_fn(grid, |x, o| {
        for i in 0..d {
            o[sym_index(i, i, d)] = 1.0 + amp * (2.0 * PI * x[i] / grid.side()[i] + phase).sin();
        }
        if d > 1 {
            o[sym_index(0, 1, d)] = 0.3 * amp * (phase + x[0]).cos();
        }
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sym_index_is_symmetric_and_in_range(d in 1usize..6, i in 0usize..6, j in 0usize..6) {
        prop_assume!(i < d && j < d);
        prop_assert_eq!(sym_index(i, j, d), sym_index(j, i, d));
        prop_assert!(sym_index(i, j, d) < sym_len(d));
    }

    #[test]
    fn c0_distance_is_symmetric_under_swap_of_scaling(amp in 0.0f64..0.4, phase in 0.0f64..6.0, lam in 0.5f64..2.0) {
        let grid = PeriodicGrid::cubic(2, 8, 1.0).unwrap();
        let g = random_metric(&grid, amp, phase);
        let scaled = MetricField::new(SymTensorField::from_data(
            &grid, g.base().data().iter().map(|v| lam * v).collect()).unwrap()).unwrap();
        // g vs λg: every generalized eigenvalue equals 1/λ or λ
        let fwd = c0_distance(&scaled, &g).unwrap();
        let back = c0_distance(&g, &scaled).unwrap();
        prop_assert!((fwd.distance - (lam - 1.0).abs()).abs() < 1e-10);
        prop_assert!((back.distance - (1.0 / lam - 1.0).abs()).abs() < 1e-10);
        prop_assert!((fwd.bilipschitz - back.bilipschitz).abs() < 1e-10 * fwd.bilipschitz);
        prop_assert_eq!(c0_distance(&g, &g).unwrap().distance, 0.0);
    }

    #[test]
    fn cutoff_profile_is_monotone_in_unit_range(inner in 0.0f64..0.9, width in 0.05f64..1.0, s in 0.0f64..3.0, ds in 0.0f64..0.5) {
        let p = CutoffProfile { inner, outer: inner + width };
        let (a, b) = (p.value(s), p.value(s + ds));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a + 1e-15);
        prop_assert!(p.derivative(s) <= 0.0);
    }

    #[test]
    fn lambert_w_solves_its_equation(x in 1e-8f64..1e8) {
        let w = lambert_w0(x);
        prop_assert!(w >= 0.0);
        prop_assert!((w * w.exp() - x).abs() <= 1e-10 * x);
    }

    #[test]
    fn scalar_curvature_scales_inversely(lam in 0.5f64..3.0) {
        let grid = PeriodicGrid::cubic(2, 16, 1.0).unwrap();
        let g = random_metric(&grid, 0.2, 0.7);
        let scaled = MetricField::new(SymTensorField::from_data(
            &grid, g.base().data().iter().map(|v| lam * v).collect()).unwrap()).unwrap();
        let r = scalar_curvature(&g);
        let rs = scalar_curvature(&scaled);
        for p in 0..grid.len() {
            prop_assert!((rs.value(p) * lam - r.value(p)).abs() < 1e-9 * (1.0 + r.max_abs()));
        }
    }
}
