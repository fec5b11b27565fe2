use ricci_lab::flow::{self, DiagnosticSchedule, FlowParams, FlowTrajectory, Tracker};
use ricci_lab::generators::{spike_member, SpikeFamilySpec};
use ricci_lab::grid::PeriodicGrid;
use ricci_lab::heat::{
    gaussian_bound_fit, green_function, green_function_static, GaussianFitConfig, GaussianVerdict, KernelConfig,
};
use ricci_lab::metric::MetricField;

fn spike_flow(n: usize) -> FlowTrajectory {
    let grid = PeriodicGrid::cubic(3, n, 4.0).unwrap();
    let mut spec = SpikeFamilySpec::lp(3, 1);
    spec.a0 = 0.3;
    spec.rho0 = 1.4;
    let m = spike_member(&spec, &grid, 1).unwrap();
    let params = FlowParams {
        t_end: 0.02,
        cfl_safety: 0.4,
        ..FlowParams::default()
    };
    let sched = DiagnosticSchedule::log_spaced(2e-3, 0.02, 5).unwrap();
    flow::run(m.metric, MetricField::euclidean(&grid), &params, &sched, Tracker::full_grid(&grid)).unwrap()
}

#[test]
fn kernel_mass_is_conserved_along_a_spike_flow() {
    let traj = spike_flow(16);
    let y = traj.grid().nearest_index(&[2.0, 2.0, 2.0]);
    let cfg = KernelConfig {
        width: Some(0.6),
        ..KernelConfig::default()
    };
    let kr = green_function(&traj, y, &cfg).unwrap();
    assert_eq!(kr.snapshots.len(), traj.states.len());
    assert!(kr.max_mass_error() < 1e-3, "{}", kr.max_mass_error());
    assert!(kr.min_value() > -1e-3 * kr.snapshots[0].values.max());
    let fit = gaussian_bound_fit(&kr, &traj, &GaussianFitConfig::default()).unwrap();
    assert_eq!(fit.verdict, GaussianVerdict::Fitted);
    assert!(fit.tracked);
    assert!(fit.c.is_finite() && fit.c > 0.0);
    assert!(fit.points_used > 0);
}

#[test]
fn static_kernel_spreads_and_keeps_mass() {
    let grid = PeriodicGrid::cubic(2, 32, 2.0).unwrap();
    let g = MetricField::euclidean(&grid);
    let y = grid.nearest_index(&[1.0, 1.0]);
    let cfg = KernelConfig {
        width: Some(0.2),
        ..KernelConfig::default()
    };
    let kr = green_function_static(&g, y, &[0.03, 0.06, 0.12], &cfg).unwrap();
    let peaks: Vec<f64> = kr.snapshots.iter().map(|s| s.values.value(y)).collect();
    assert!(peaks.windows(2).all(|w| w[1] < w[0]), "{peaks:?}");
    assert!(kr.max_mass_error() < 1e-9);
    // 2-D Gaussian peak 1 / (4π τ) well before the kernel feels the period
    let tau = kr.snapshots[0].kernel_time;
    let want = 1.0 / (4.0 * std::f64::consts::PI * tau);
    assert!((peaks[0] - want).abs() < 0.03 * want, "{} vs {want}", peaks[0]);
}
