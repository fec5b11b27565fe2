//! Green function of `∂_t - Δ_{g(t)} - R` along a trajectory.
//!
//! The solver evolves the density `ρ = u √g` in the DeTurck frame,
//! `∂_t ρ = ∂_i(√g g^{ij} ∂_j u) + ∂_i(√g W^i u)`, which carries the `R u`
//! term through `∂_t √g = (W-divergence - R) √g` and conserves mass exactly.
//! Between snapshots `√g`, `√g g^{-1}` and `√g W` are interpolated linearly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::volume_ratio_monitor;
use crate::curvature::scalar_curvature;
use crate::distance::distance_field;
use crate::error::{LabError, Result};
use crate::field::{sym_index, sym_len, ScalarField};
use crate::flow::{FlowState, FlowTrajectory};
use crate::grid::PeriodicGrid;
use crate::linalg;
use crate::metric::MetricField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    /// Gaussian bump width in physical units; `None` means `3h`.
    pub width: Option<f64>,
    /// fraction of the explicit stability limit `h^2 / (2n λ_max(g^{-1}))`
    pub cfl: f64,
    /// fixed step; must respect the stability limit
    pub dt: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            width: None,
            cfl: 0.5,
            dt: None,
        }
    }
}

impl KernelConfig {
    pub fn width_on(&self, grid: &PeriodicGrid) -> f64 {
        self.width.unwrap_or(3.0 * grid.min_spacing())
    }
}

/// One kernel snapshot.
#[derive(Clone, Debug)]
pub struct KernelSnapshot {
    /// flow time
    pub t: f64,
    /// `t + s_0`: the bump of width `w` is the kernel at time `s_0 = w^2 / 2`
    pub kernel_time: f64,
    pub values: ScalarField,
    pub mass: f64,
    pub min_value: f64,
}

#[derive(Clone, Debug)]
pub struct KernelRun {
    pub source: usize,
    pub width: f64,
    pub time_shift: f64,
    pub steps: usize,
    pub snapshots: Vec<KernelSnapshot>,
}

impl KernelRun {
    pub fn max_mass_error(&self) -> f64 {
        self.snapshots.iter().map(|s| (s.mass - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.snapshots.iter().map(|s| s.min_value).fold(f64::INFINITY, f64::min)
    }
}

/// Coefficients of the density equation at one time.
#[derive(Clone)]
struct Coeffs {
    s: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    lambda: f64,
}

impl Coeffs {
    fn of_state(g: &MetricField, w: Option<&[f64]>) -> Self {
        let d = g.dim();
        let ns = sym_len(d);
        let n = g.grid().len();
        let mut a = vec![0.0; n * ns];
        let mut b = vec![0.0; n * d];
        for p in 0..n {
            let sg = g.sqrt_det().value(p);
            for (o, v) in a[p * ns..(p + 1) * ns].iter_mut().zip(g.inverse().at(p)) {
                *o = sg * v;
            }
            if let Some(w) = w {
                for k in 0..d {
                    b[p * d + k] = sg * w[p * d + k];
                }
            }
        }
        Self {
            s: g.sqrt_det().data().to_vec(),
            a,
            b,
            lambda: g.max_inverse_eigenvalue(),
        }
    }

    fn blend(c0: &Self, c1: &Self, th: f64) -> Self {
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(a, b)| a + th * (b - a)).collect() };
        Self {
            s: mix(&c0.s, &c1.s),
            a: mix(&c0.a, &c1.a),
            b: mix(&c0.b, &c1.b),
            lambda: c0.lambda.max(c1.lambda),
        }
    }
}

struct Operator {
    grid: PeriodicGrid,
    /// `nbr[(p * d + a) * 2 + {0,1}]` = `p - e_a`, `p + e_a`
    nbr: Vec<usize>,
    /// static potential `R`, added as `R ρ`
    potential: Option<Vec<f64>>,
}

impl Operator {
    fn new(grid: &PeriodicGrid, potential: Option<Vec<f64>>) -> Self {
        let d = grid.dim();
        let mut nbr = vec![0; grid.len() * d * 2];
        for p in 0..grid.len() {
            let c = grid.coords(p);
            for a in 0..d {
                let mut o = vec![0isize; d];
                o[a] = -1;
                nbr[(p * d + a) * 2] = grid.offset_index(&c, &o);
                o[a] = 1;
                nbr[(p * d + a) * 2 + 1] = grid.offset_index(&c, &o);
            }
        }
        Self {
            grid: grid.clone(),
            nbr,
            potential,
        }
    }

    fn apply(&self, c: &Coeffs, rho: &[f64]) -> Vec<f64> {
        let d = self.grid.dim();
        let ns = sym_len(d);
        let n = self.grid.len();
        let h: Vec<f64> = (0..d).map(|a| self.grid.spacing(a)).collect();
        let u: Vec<f64> = rho.iter().zip(&c.s).map(|(r, s)| r / s).collect();
        let nb = |p: usize, a: usize, side: usize| self.nbr[(p * d + a) * 2 + side];
        // flux of the off-diagonal diffusion and of the drift
        let mut flux = vec![0.0; n * d];
        flux.par_chunks_mut(d).enumerate().for_each(|(p, f)| {
            for (a, fa) in f.iter_mut().enumerate() {
                let mut v = c.b[p * d + a] * u[p];
                for bb in 0..d {
                    if bb != a {
                        let du = (u[nb(p, bb, 1)] - u[nb(p, bb, 0)]) / (2.0 * h[bb]);
                        v += c.a[p * ns + sym_index(a, bb, d)] * du;
                    }
                }
                *fa = v;
            }
        });
        (0..n)
            .into_par_iter()
            .map(|p| {
                let mut out = 0.0;
                for a in 0..d {
                    let (m, pl) = (nb(p, a, 0), nb(p, a, 1));
                    let k = sym_index(a, a, d);
                    let ap = 0.5 * (c.a[p * ns + k] + c.a[pl * ns + k]);
                    let am = 0.5 * (c.a[p * ns + k] + c.a[m * ns + k]);
                    out += (ap * (u[pl] - u[p]) - am * (u[p] - u[m])) / (h[a] * h[a]);
                    out += (flux[pl * d + a] - flux[m * d + a]) / (2.0 * h[a]);
                }
                if let Some(r) = &self.potential {
                    out += r[p] * rho[p];
                }
                out
            })
            .collect()
    }

    fn stable_dt(&self, lambda: f64) -> f64 {
        let h = self.grid.min_spacing();
        h * h / (2.0 * self.grid.dim() as f64 * lambda)
    }
}

/// Metric-normalized Gaussian bump `exp(-v^T g(y) v / 2w^2)` with `∫ u dμ = 1`.
pub fn gaussian_bump(g: &MetricField, y: usize, width: f64) -> ScalarField {
    let grid = g.grid();
    let gy = g.matrix(y);
    let yp = grid.position(y);
    let mut u = ScalarField::from_fn(grid, |x, o| {
        let q = quadratic(&gy, &grid.displacement(x, &yp));
        o[0] = (-q / (2.0 * width * width)).exp();
    });
    let mass: f64 = (0..grid.len()).map(|p| u.value(p) * g.sqrt_det().value(p)).sum::<f64>() * grid.cell_volume();
    u.data_mut().iter_mut().for_each(|v| *v /= mass);
    u
}

fn check_width(grid: &PeriodicGrid, width: f64) -> Result<()> {
    if !(width >= 2.0 * grid.min_spacing()) {
        return Err(LabError::arg(format!(
            "mollifier width {width} below 2h = {}",
            2.0 * grid.min_spacing()
        )));
    }
    Ok(())
}

struct Stepper<'a> {
    op: &'a Operator,
    cfg: &'a KernelConfig,
    steps: usize,
}

impl Stepper<'_> {
    /// Advance `rho` over `[t0, t1]` with coefficients interpolated between `c0` and `c1`.
    fn advance(&mut self, rho: &mut Vec<f64>, c0: &Coeffs, c1: &Coeffs, t0: f64, t1: f64) -> Result<()> {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(());
        }
        let limit = self.op.stable_dt(c0.lambda.max(c1.lambda));
        let dt_max = match self.cfg.dt {
            Some(dt) if dt > limit => {
                return Err(LabError::arg(format!("kernel step {dt} exceeds the stability limit {limit}")))
            }
            Some(dt) => dt,
            None => self.cfg.cfl * limit,
        };
        let nsteps = (span / dt_max).ceil().max(1.0) as usize;
        let dt = span / nsteps as f64;
        let frozen = c0.s == c1.s && c0.a == c1.a && c0.b == c1.b;
        for k in 0..nsteps {
            let th0 = k as f64 / nsteps as f64;
            let th1 = (k + 1) as f64 / nsteps as f64;
            let (ca, cb);
            let (ca_ref, cb_ref) = if frozen {
                (c0, c0)
            } else {
                ca = Coeffs::blend(c0, c1, th0);
                cb = Coeffs::blend(c0, c1, th1);
                (&ca, &cb)
            };
            // Heun
            let k1 = self.op.apply(ca_ref, rho);
            let pred: Vec<f64> = rho.iter().zip(&k1).map(|(r, k)| r + dt * k).collect();
            let k2 = self.op.apply(cb_ref, &pred);
            for ((r, a), b) in rho.iter_mut().zip(&k1).zip(&k2) {
                *r += 0.5 * dt * (a + b);
            }
            self.steps += 1;
        }
        Ok(())
    }
}

fn snapshot(grid: &PeriodicGrid, t: f64, shift: f64, rho: &[f64], s: &[f64]) -> Result<KernelSnapshot> {
    let mass = rho.iter().sum::<f64>() * grid.cell_volume();
    if !mass.is_finite() || mass < 0.0 {
        return Err(LabError::Numerical(format!("kernel mass {mass} at t = {t}")));
    }
    let values = ScalarField::from_data(grid, rho.iter().zip(s).map(|(r, s)| r / s).collect())?;
    Ok(KernelSnapshot {
        t,
        kernel_time: t + shift,
        min_value: values.min(),
        mass,
        values,
    })
}

/// Kernel along a flow trajectory, started from a bump at the grid point `y`.
pub fn green_function(traj: &FlowTrajectory, y: usize, cfg: &KernelConfig) -> Result<KernelRun> {
    let grid = traj.grid().clone();
    if y >= grid.len() {
        return Err(LabError::arg("source index outside the grid"));
    }
    let width = cfg.width_on(&grid);
    check_width(&grid, width)?;
    let op = Operator::new(&grid, None);
    let coeffs = |st: &FlowState| Coeffs::of_state(&st.g, Some(st.w.data()));
    let first = &traj.states[0];
    let u0 = gaussian_bump(&first.g, y, width);
    let mut c_prev = coeffs(first);
    let mut rho: Vec<f64> = u0.data().iter().zip(&c_prev.s).map(|(u, s)| u * s).collect();
    let shift = 0.5 * width * width;
    let mut stepper = Stepper { op: &op, cfg, steps: 0 };
    let mut snapshots = vec![snapshot(&grid, first.t, shift, &rho, &c_prev.s)?];
    for pair in traj.states.windows(2) {
        let c_next = coeffs(&pair[1]);
        stepper.advance(&mut rho, &c_prev, &c_next, pair[0].t, pair[1].t)?;
        snapshots.push(snapshot(&grid, pair[1].t, shift, &rho, &c_next.s)?);
        c_prev = c_next;
    }
    Ok(KernelRun {
        source: y,
        width,
        time_shift: shift,
        steps: stepper.steps,
        snapshots,
    })
}

/// Kernel of `∂_t - Δ_g - R_g` for a fixed metric, reported at the given
/// kernel times (each must exceed the mollifier shift `w^2 / 2`).
pub fn green_function_static(g: &MetricField, y: usize, kernel_times: &[f64], cfg: &KernelConfig) -> Result<KernelRun> {
    let grid = g.grid().clone();
    if y >= grid.len() {
        return Err(LabError::arg("source index outside the grid"));
    }
    let width = cfg.width_on(&grid);
    check_width(&grid, width)?;
    let shift = 0.5 * width * width;
    let mut times = kernel_times.to_vec();
    times.sort_by(f64::total_cmp);
    if times.first().is_some_and(|&t| t <= shift) {
        return Err(LabError::arg(format!("kernel times must exceed the mollifier shift {shift}")));
    }
    let r = scalar_curvature(g);
    let potential = if r.max_abs() == 0.0 { None } else { Some(r.into_data()) };
    let op = Operator::new(&grid, potential);
    let c = Coeffs::of_state(g, None);
    let u0 = gaussian_bump(g, y, width);
    let mut rho: Vec<f64> = u0.data().iter().zip(&c.s).map(|(u, s)| u * s).collect();
    let mut stepper = Stepper { op: &op, cfg, steps: 0 };
    let mut t = 0.0;
    let mut snapshots = vec![snapshot(&grid, 0.0, shift, &rho, &c.s)?];
    for tau in times {
        let t1 = tau - shift;
        stepper.advance(&mut rho, &c, &c, t, t1)?;
        t = t1;
        snapshots.push(snapshot(&grid, t, shift, &rho, &c.s)?);
    }
    Ok(KernelRun {
        source: y,
        width,
        time_shift: shift,
        steps: stepper.steps,
        snapshots,
    })
}

/// Principal branch of the Lambert W function for `x >= 0` (Halley iteration).
pub fn lambert_w0(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mut w = if x < 3.0 { (1.0 + x).ln() * 0.7 } else { x.ln() - x.ln().ln().max(0.0) };
    for _ in 0..64 {
        let e = w.exp();
        let f = w * e - x;
        let step = f / (e * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0));
        w -= step;
        if step.abs() <= 1e-15 * w.abs().max(1e-300) {
            break;
        }
    }
    w
}

/// Minimal `C` with `q <= C exp(-a / C)`, `a = d^2/t >= 0`, `q = G t^{n/2} > 0`.
pub fn minimal_gaussian_constant(q: f64, a: f64) -> f64 {
    if a == 0.0 {
        q
    } else {
        a / lambert_w0(a / q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussianVerdict {
    Fitted,
    HypothesesUnmet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianFitConfig {
    /// points with `G <= floor` are ignored
    pub floor: f64,
    /// fixed exponent constant for the prefactor-only fit
    pub frozen_exponent: Option<f64>,
    /// largest `A` accepted by the hypothesis monitors
    pub a_max: f64,
    /// skip snapshots with kernel time below this
    pub t_min: f64,
}

impl Default for GaussianFitConfig {
    fn default() -> Self {
        Self {
            floor: 1e-12,
            frozen_exponent: None,
            a_max: 100.0,
            t_min: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub c: f64,
    /// prefactor when the exponent constant is frozen
    pub prefactor: Option<f64>,
    pub worst_time: f64,
    pub worst_point: usize,
    pub points_used: usize,
    /// `(kernel time, minimal C at that snapshot)`
    pub per_snapshot: Vec<(f64, f64)>,
    /// `max t |Rm|`
    pub a_rm: f64,
    /// `min Vol(B(y, √t)) / t^{n/2}`
    pub volume_ratio: f64,
    pub a_monitor: f64,
    /// whether `Φ_t` was resolved on every grid point
    pub tracked: bool,
    pub verdict: GaussianVerdict,
}

/// Fits the Gaussian upper bound `G <= C t^{-n/2} exp(-d_0^2 / C t)`.
///
/// With a full-grid tracker the Ricci-frame kernel at `x` is read off at
/// `Φ_t(x)`; otherwise `Φ_t` is taken as the identity.
pub fn gaussian_bound_fit(kr: &KernelRun, traj: &FlowTrajectory, cfg: &GaussianFitConfig) -> Result<GaussianFit> {
    let grid = traj.grid();
    let n = grid.dim() as f64;
    let d0 = distance_field(&traj.initial().g, kr.source);
    let mut c: f64 = 0.0;
    let mut pref: f64 = 0.0;
    let (mut worst_time, mut worst_point, mut used) = (0.0, kr.source, 0usize);
    let mut tracked = true;
    let mut buf = [0.0];
    let mut per_snapshot = Vec::new();
    for snap in &kr.snapshots {
        let tau = snap.kernel_time;
        if tau < cfg.t_min {
            continue;
        }
        let st = traj
            .states
            .iter()
            .find(|s| (s.t - snap.t).abs() <= 1e-12 * (1.0 + snap.t))
            .ok_or_else(|| LabError::arg(format!("no trajectory snapshot at t = {}", snap.t)))?;
        let full = st.tracker.is_full_grid();
        let mut c_snap: f64 = 0.0;
        tracked &= full || snap.t == 0.0;
        for p in 0..grid.len() {
            let gv = if full && snap.t > 0.0 {
                snap.values.interpolate(&st.tracker.position(grid, p), &mut buf);
                buf[0]
            } else {
                snap.values.value(p)
            };
            if gv <= cfg.floor {
                continue;
            }
            used += 1;
            let dd = d0.at(p);
            let q = gv * tau.powf(n / 2.0);
            let ci = minimal_gaussian_constant(q, dd * dd / tau);
            c_snap = c_snap.max(ci);
            if ci > c {
                c = ci;
                worst_time = tau;
                worst_point = p;
            }
            if let Some(ce) = cfg.frozen_exponent {
                pref = pref.max(q * (dd * dd / (ce * tau)).exp());
            }
        }
        per_snapshot.push((tau, c_snap));
    }
    let a_rm = traj.states.iter().map(|s| s.monitors.t_rm).fold(0.0, f64::max);
    let vr = volume_ratio_monitor(traj, &grid.position(kr.source)).unwrap_or(f64::NAN);
    let a_monitor = if vr.is_finite() && vr > 0.0 { a_rm.max(1.0 / vr) } else { a_rm };
    let ok = a_monitor.is_finite() && a_monitor <= cfg.a_max && (vr.is_infinite() || vr > 0.0);
    Ok(GaussianFit {
        c,
        prefactor: cfg.frozen_exponent.map(|_| pref),
        worst_time,
        worst_point,
        points_used: used,
        per_snapshot,
        a_rm,
        volume_ratio: vr,
        a_monitor,
        tracked,
        verdict: if ok {
            GaussianVerdict::Fitted
        } else {
            GaussianVerdict::HypothesesUnmet
        },
    })
}

/// Explicit stability limit of the kernel step on a fixed metric.
pub fn kernel_step_limit(g: &MetricField) -> f64 {
    let h = g.grid().min_spacing();
    h * h / (2.0 * g.dim() as f64 * g.max_inverse_eigenvalue())
}

fn quadratic(g: &linalg::Mat, v: &[f64]) -> f64 {
    let mut q = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            q += g[i][j] * v[i] * v[j];
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Periodized Euclidean heat kernel on the cube of side `l`.
    fn flat_oracle(disp: &[f64], t: f64, l: f64) -> f64 {
        disp.iter()
            .map(|&x| {
                (-6..=6)
                    .map(|k| (-(x + k as f64 * l).powi(2) / (4.0 * t)).exp())
                    .sum::<f64>()
                    / (4.0 * PI * t).sqrt()
            })
            .product()
    }

    #[test]
    fn lambert_w_inverts() {
        for x in [1e-8, 0.3, 1.0, 2.5, 10.0, 1e3, 1e12] {
            let w = lambert_w0(x);
            assert!((w * w.exp() - x).abs() <= 1e-12 * x, "{x} {w}");
        }
        let c = minimal_gaussian_constant(0.5, 2.0);
        assert!((c * (-2.0 / c).exp() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constants_are_stationary_on_flat() {
        let g = PeriodicGrid::cubic(3, 8, 1.0).unwrap();
        let m = MetricField::euclidean(&g);
        let op = Operator::new(&g, None);
        let c = Coeffs::of_state(&m, None);
        let out = op.apply(&c, &vec![0.7; g.len()]);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_static_matches_periodized_kernel() {
        let g = PeriodicGrid::cubic(3, 48, 1.0).unwrap();
        let m = MetricField::euclidean(&g);
        let y = g.index(&[24, 24, 24]);
        let times = [0.01, 0.02, 0.03];
        let run = green_function_static(&m, y, &times, &KernelConfig::default()).unwrap();
        let probes = [[24, 24, 24], [27, 24, 24], [27, 27, 22]];
        for (snap, c) in run.snapshots[1..].iter().zip(probes) {
            let p = g.index(&c);
            let disp = g.displacement(&g.position(p), &g.position(y));
            let exact = flat_oracle(&disp, snap.kernel_time, 1.0);
            let rel = snap.values.value(p) / exact - 1.0;
            assert!(rel.abs() < 0.02, "t = {} rel = {rel}", snap.kernel_time);
            assert!((snap.mass - 1.0).abs() < 1e-12);
        }
        let at_y = run.snapshots[1].values.value(y);
        assert!((at_y / 22.45 - 1.0).abs() < 0.02, "{at_y}");
        assert!(run.min_value() > -1e-12);
    }

    #[test]
    fn static_kernel_is_symmetric() {
        let g = PeriodicGrid::cubic(3, 20, 1.0).unwrap();
        let m = MetricField::from_fn(&g, |x, o| {
            let s = 0.15 * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos();
            o[0] = 1.0 + s;
            o[1] = 0.1 * s;
            o[3] = 1.2;
            o[5] = 1.0 - 0.5 * s;
        })
        .unwrap();
        let x = g.index(&[5, 7, 9]);
        let y = g.index(&[9, 10, 8]);
        let cfg = KernelConfig {
            width: Some(2.0 * g.min_spacing()),
            ..KernelConfig::default()
        };
        let t = [0.02];
        let gx = green_function_static(&m, x, &t, &cfg).unwrap();
        let gy = green_function_static(&m, y, &t, &cfg).unwrap();
        let a = gx.snapshots[1].values.value(y);
        let b = gy.snapshots[1].values.value(x);
        assert!((a / b - 1.0).abs() < 0.03, "{a} {b}");
        assert!(gx.min_value() > -1e-10 && gy.min_value() > -1e-10);
    }

    #[test]
    fn width_and_step_checks() {
        let g = PeriodicGrid::cubic(2, 16, 1.0).unwrap();
        let m = MetricField::euclidean(&g);
        let narrow = KernelConfig {
            width: Some(g.min_spacing()),
            ..KernelConfig::default()
        };
        assert!(green_function_static(&m, 0, &[0.05], &narrow).is_err());
        let big = KernelConfig {
            dt: Some(2.0 * kernel_step_limit(&m)),
            ..KernelConfig::default()
        };
        assert!(matches!(
            green_function_static(&m, 0, &[0.05], &big),
            Err(LabError::Argument(_))
        ));
    }

    #[test]
    fn frozen_exponent_prefactor_is_linear() {
        let g = PeriodicGrid::cubic(2, 24, 1.0).unwrap();
        let m = MetricField::euclidean(&g);
        let y = g.index(&[12, 12]);
        let times = [0.01, 0.02];
        let run = green_function_static(&m, y, &times, &KernelConfig::default()).unwrap();
        let mut doubled = run.clone();
        for s in &mut doubled.snapshots {
            s.values = s.values.map(|v| 2.0 * v);
        }
        let traj = FlowTrajectory::frozen(
            m.clone(),
            &run.snapshots.iter().map(|s| s.t).filter(|&t| t > 0.0).collect::<Vec<_>>(),
            crate::flow::Tracker::new(2, vec![g.position(y)]).unwrap(),
        )
        .unwrap();
        let cfg = GaussianFitConfig {
            frozen_exponent: Some(8.0),
            ..GaussianFitConfig::default()
        };
        let a = gaussian_bound_fit(&run, &traj, &cfg).unwrap();
        let b = gaussian_bound_fit(&doubled, &traj, &cfg).unwrap();
        let (pa, pb) = (a.prefactor.unwrap(), b.prefactor.unwrap());
        assert!((pb / pa - 2.0).abs() < 1e-12);
        assert!(a.c <= 4.0 * PI * 1.1, "{a:?}");
        assert_eq!(a.verdict, GaussianVerdict::Fitted);
    }
}
