//! Ball integrals, curvature-deficit functionals, the cutoff field and the
//! audits of the localized energy, barrier and ball-inclusion estimates.

use serde::{Deserialize, Serialize};

use crate::distance::{distance_field, distance_from_point, DistanceField, GraphStencil};
use crate::error::{LabError, Result};
use crate::field::ScalarField;
use crate::flow::{FlowState, FlowTrajectory};
use crate::metric::{metric_length, MetricField};
use crate::stencil::central_derivative;

/// Slack multiplier applied to fitted constants before verdicts.
pub const FIT_SLACK: f64 = 1.05;

fn check_radius(grid: &crate::grid::PeriodicGrid, r: f64) -> Result<()> {
    if !(r > 0.0) {
        return Err(LabError::arg(format!("ball radius {r} must be positive")));
    }
    if r > grid.injectivity_radius() {
        return Err(LabError::arg(format!(
            "ball radius {r} exceeds the injectivity-safe radius {}",
            grid.injectivity_radius()
        )));
    }
    Ok(())
}

/// `Σ_{D < r} f √det g h^n`.
pub fn ball_integral(f: &ScalarField, g: &MetricField, dist: &DistanceField, r: f64) -> Result<f64> {
    let grid = g.grid();
    check_radius(grid, r)?;
    f.check_same_grid(grid)?;
    dist.values.check_same_grid(grid)?;
    let cv = grid.cell_volume();
    let mut s = 0.0;
    for p in 0..grid.len() {
        if dist.at(p) < r {
            s += f.value(p) * g.sqrt_det().value(p);
        }
    }
    Ok(s * cv)
}

/// Reference level of a deficit: constant or a field (continuous κ).
#[derive(Clone, Debug)]
pub enum Reference {
    Constant(f64),
    Field(ScalarField),
}

impl Reference {
    fn at(&self, p: usize) -> f64 {
        match self {
            Reference::Constant(c) => *c,
            Reference::Field(f) => f.value(p),
        }
    }
}

/// `(κ - R)_+^p` pointwise.
pub fn deficit_power(r: &ScalarField, reference: &Reference, p: f64) -> Result<ScalarField> {
    if let Reference::Field(f) = reference {
        f.check_same_grid(r.grid())?;
    }
    Ok(ScalarField::from_data(
        r.grid(),
        (0..r.grid().len())
            .map(|i| (reference.at(i) - r.value(i)).max(0.0).powf(p))
            .collect(),
    )?)
}

/// Ball integral of `(κ - R)_+^p`.
pub fn negative_part_norm(
    r: &ScalarField,
    reference: &Reference,
    p: f64,
    g: &MetricField,
    dist: &DistanceField,
    radius: f64,
) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(LabError::arg(format!("exponent {p} must be at least 1")));
    }
    ball_integral(&deficit_power(r, reference, p)?, g, dist, radius)
}

/// Result of the weighted-L¹ scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightedL1Scan {
    pub value: f64,
    pub center: usize,
    pub radius: f64,
    /// `(center, r, r^{2-n-2δ} ∫ (R-σ)_-)` for every scanned pair
    pub profile: Vec<(usize, f64, f64)>,
}

/// `max_{x, r} r^{2-n-2δ} ∫_{B(x, r)} (R - σ)_- dμ_g`.
pub fn weighted_l1_sup(
    r: &ScalarField,
    sigma: f64,
    delta: f64,
    g: &MetricField,
    centers: &[usize],
    radii: &[f64],
) -> Result<WeightedL1Scan> {
    if centers.is_empty() || radii.is_empty() {
        return Err(LabError::arg("weighted-L1 scan needs centers and radii"));
    }
    if !(delta > 0.0) {
        return Err(LabError::arg("delta must be positive"));
    }
    let n = g.dim() as f64;
    let f = deficit_power(r, &Reference::Constant(sigma), 1.0)?;
    let mut best = WeightedL1Scan {
        value: 0.0,
        center: centers[0],
        radius: radii[0],
        profile: Vec::new(),
    };
    for &c in centers {
        let dist = distance_field(g, c);
        for &rad in radii {
            let v = rad.powf(2.0 - n - 2.0 * delta) * ball_integral(&f, g, &dist, rad)?;
            best.profile.push((c, rad, v));
            if v > best.value {
                best.value = v;
                best.center = c;
                best.radius = rad;
            }
        }
    }
    Ok(best)
}

/// `φ`: 1 on `[0, 1/2]`, `1 - S5(2s - 1)` on `(1/2, 1)`, 0 beyond, with
/// `S5(τ) = 6τ^5 - 15τ^4 + 10τ^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub inner: f64,
    pub outer: f64,
}

impl Default for CutoffProfile {
    fn default() -> Self {
        Self {
            inner: 0.5,
            outer: 1.0,
        }
    }
}

/// Outcome of the profile invariant checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileCheck {
    pub samples: usize,
    pub in_range: bool,
    pub monotone: bool,
    pub second_derivative_bound: bool,
    pub slope_bound: bool,
    pub max_slope: f64,
    pub min_second_over_value: f64,
}

impl ProfileCheck {
    pub fn all(&self) -> bool {
        self.in_range && self.monotone && self.second_derivative_bound && self.slope_bound
    }
}

impl CutoffProfile {
    fn tau(&self, s: f64) -> Option<f64> {
        if s <= self.inner {
            None
        } else if s >= self.outer {
            Some(1.0)
        } else {
            Some((s - self.inner) / (self.outer - self.inner))
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        match self.tau(s) {
            None => 1.0,
            Some(t) => 1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t)),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self.tau(s) {
            Some(t) if t < 1.0 => {
                let k = 1.0 / (self.outer - self.inner);
                -k * 30.0 * t * t * (1.0 - t) * (1.0 - t)
            }
            _ => 0.0,
        }
    }

    pub fn second_derivative(&self, s: f64) -> f64 {
        match self.tau(s) {
            Some(t) if t < 1.0 => {
                let k = 1.0 / (self.outer - self.inner);
                -k * k * 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)
            }
            _ => 0.0,
        }
    }

    /// Checks range, monotonicity, `φ'' >= -10^4 φ` and `|φ'| <= 10^4` on
    /// `samples` equispaced points of `[0, 1.5]`.
    pub fn check(&self, samples: usize) -> ProfileCheck {
        let mut c = ProfileCheck {
            samples,
            in_range: true,
            monotone: true,
            second_derivative_bound: true,
            slope_bound: true,
            max_slope: 0.0,
            min_second_over_value: f64::INFINITY,
        };
        let mut prev = f64::INFINITY;
        for i in 0..samples {
            let s = 1.5 * i as f64 / (samples - 1).max(1) as f64;
            let v = self.value(s);
            let d1 = self.derivative(s);
            let d2 = self.second_derivative(s);
            c.in_range &= (0.0..=1.0).contains(&v);
            c.monotone &= v <= prev;
            prev = v;
            c.second_derivative_bound &= d2 >= -1e4 * v;
            c.slope_bound &= d1.abs() <= 1e4;
            c.max_slope = c.max_slope.max(d1.abs());
            if v > 0.0 {
                c.min_second_over_value = c.min_second_over_value.min(d2 / v);
            }
        }
        c
    }
}

/// Parameters of the cutoff field `e^{-k m t / r^2} φ^m((d_t + 2 C_0 √t) / r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffParams {
    pub m: u32,
    pub c0: f64,
    /// Rate `k` of the exponential prefactor (10^4 for the stated profile).
    pub rate: f64,
    /// Spatial scale `r` (the unit-scale construction has `r = 1`).
    pub scale: f64,
    pub profile: CutoffProfile,
}

impl CutoffParams {
    pub fn new(dim: usize, c0: f64, scale: f64) -> Self {
        Self {
            m: 2 * dim as u32,
            c0,
            rate: 1e4,
            scale,
            profile: CutoffProfile::default(),
        }
    }
}

/// Image `Φ_t(x_0)` of a tracked base point.
pub fn tracked_center(state: &FlowState, x0: &[f64]) -> Result<Vec<f64>> {
    let grid = state.g.grid();
    let i = state
        .tracker
        .find(grid, x0)
        .ok_or_else(|| LabError::arg(format!("base point {x0:?} is not tracked")))?;
    Ok(state.tracker.position(grid, i))
}

/// Distance under `g(t)` from `Φ_t(x_0)`.
pub fn evolving_distance(state: &FlowState, x0: &[f64]) -> Result<DistanceField> {
    let c = tracked_center(state, x0)?;
    Ok(distance_from_point(&state.g, &c, state.t, GraphStencil::default()))
}

/// Cutoff field from a distance field at time `t`.
pub fn cutoff_from_distance(dist: &DistanceField, t: f64, p: &CutoffParams) -> ScalarField {
    let pre = (-p.rate * p.m as f64 * t / (p.scale * p.scale)).exp();
    let shift = 2.0 * p.c0 * t.sqrt();
    dist.values
        .map(|d| pre * p.profile.value((d + shift) / p.scale).powi(p.m as i32))
}

/// Cutoff field at snapshot time `t` of the trajectory, centered at `Φ_t(x_0)`.
pub fn cutoff_field(traj: &FlowTrajectory, t: f64, x0: &[f64], p: &CutoffParams) -> Result<ScalarField> {
    let st = traj
        .states
        .iter()
        .find(|s| (s.t - t).abs() <= 1e-12 * (1.0 + t))
        .ok_or_else(|| LabError::arg(format!("t = {t} is not a snapshot time")))?;
    let dist = evolving_distance(st, x0)?;
    Ok(cutoff_from_distance(&dist, st.t, p))
}

/// Pointwise audit of `|∇Φ|_g <= k m Φ^{1-1/m} / r`; the right side uses the
/// largest `Φ` over the stencil neighbourhood of each point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientAudit {
    pub max_gradient: f64,
    pub worst_ratio: f64,
    pub holds: bool,
}

pub fn cutoff_gradient_audit(phi: &ScalarField, g: &MetricField, p: &CutoffParams) -> Result<GradientAudit> {
    let grid = g.grid();
    let d = grid.dim();
    let grads: Vec<ScalarField> = (0..d)
        .map(|a| central_derivative(phi, a, 1))
        .collect::<Result<_>>()?;
    let mut out = GradientAudit {
        max_gradient: 0.0,
        worst_ratio: 0.0,
        holds: true,
    };
    let m = p.m as f64;
    for q in 0..grid.len() {
        let gi = g.inverse_matrix(q);
        let v: Vec<f64> = (0..d).map(|a| grads[a].value(q)).collect();
        let norm = metric_length(&gi, &v, d);
        let c = grid.coords(q);
        let mut local_max = phi.value(q);
        for a in 0..d {
            for o in [-2isize, -1, 1, 2] {
                let mut off = vec![0isize; d];
                off[a] = o;
                local_max = local_max.max(phi.value(grid.offset_index(&c, &off)));
            }
        }
        let bound = p.rate * m * local_max.powf(1.0 - 1.0 / m) / p.scale;
        out.max_gradient = out.max_gradient.max(norm);
        if norm > 0.0 {
            let ratio = if bound > 0.0 { norm / bound } else { f64::INFINITY };
            out.worst_ratio = out.worst_ratio.max(ratio);
        }
    }
    out.holds = out.worst_ratio <= 1.0;
    Ok(out)
}

/// `E(t) = ∫ (R - σ)_-^{n/2} Φ dμ_t` along a trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub derivative: Vec<f64>,
    pub sigma: f64,
    pub m: u32,
    pub center: Vec<f64>,
}

/// Centered differences on a nonuniform grid, one-sided at the ends.
pub fn nonuniform_derivative(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (y[1] - y[0]) / (t[1] - t[0])
            } else if i == n - 1 {
                (y[n - 1] - y[n - 2]) / (t[n - 1] - t[n - 2])
            } else {
                let (h0, h1) = (t[i] - t[i - 1], t[i + 1] - t[i]);
                (h0 * h0 * y[i + 1] - h1 * h1 * y[i - 1] + (h1 * h1 - h0 * h0) * y[i]) / (h0 * h1 * (h0 + h1))
            }
        })
        .collect()
}

pub fn energy_trace(traj: &FlowTrajectory, sigma: f64, x0: &[f64], p: &CutoffParams) -> Result<EnergyTrace> {
    if traj.states.len() < 3 {
        return Err(LabError::arg("energy trace needs at least 3 snapshots"));
    }
    let n = traj.grid().dim() as f64;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for st in &traj.states {
        let dist = evolving_distance(st, x0)?;
        let phi = cutoff_from_distance(&dist, st.t, p);
        let grid = st.g.grid();
        let mut e = 0.0;
        for q in 0..grid.len() {
            let def = (sigma - st.scalar.value(q)).max(0.0);
            if def > 0.0 {
                e += def.powf(n / 2.0) * phi.value(q) * st.g.sqrt_det().value(q);
            }
        }
        times.push(st.t);
        values.push(e * grid.cell_volume());
    }
    let derivative = nonuniform_derivative(&times, &values);
    Ok(EnergyTrace {
        times,
        values,
        derivative,
        sigma,
        m: p.m,
        center: x0.to_vec(),
    })
}

/// One snapshot of the localized-persistence audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop31Row {
    pub t: f64,
    pub lhs: f64,
    pub rhs_initial: f64,
    pub energy: f64,
}

/// Minimal constants of the localized `L^{n/2}` persistence estimate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop31Report {
    pub sigma: f64,
    pub r_scale: f64,
    pub rows: Vec<Prop31Row>,
    /// minimal `C` with `dE/dt <= C (E + 1) / √t` (differential form)
    pub c5: f64,
    /// minimal `C_6` with `E(t) + 1 <= e^{C_6 √t / r} (E(0) + 1)` (integrated form)
    pub c6: f64,
    /// minimal `C_7` given `C_6`
    pub c7: f64,
    pub holds: bool,
}

impl Prop31Report {
    /// Smallest `C_7` making the estimate hold for the given `C_6`.
    pub fn c7_given(&self, c6: f64) -> f64 {
        c7_for(&self.rows, c6, self.r_scale)
    }

    /// Whether the estimate holds at every row for `(c6, c7)`.
    pub fn holds_with(&self, c6: f64, c7: f64) -> bool {
        self.rows.iter().all(|row| {
            let s = row.t.sqrt() / self.r_scale;
            row.lhs <= (c6 * s).exp() * row.rhs_initial + c7 * s + 1e-14 * (1.0 + row.lhs)
        })
    }

    /// LHS at snapshot time `t` (`None` if `t` is not a snapshot).
    pub fn lhs_at(&self, t: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.t - t).abs() <= 1e-9 * (1.0 + t))
            .map(|r| r.lhs)
    }
}

fn c7_for(rows: &[Prop31Row], c6: f64, r: f64) -> f64 {
    rows.iter()
        .filter(|row| row.t > 0.0)
        .map(|row| {
            let s = row.t.sqrt() / r;
            ((row.lhs - (c6 * s).exp() * row.rhs_initial) / s).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Localized persistence audit: `∫_{B_{g(t)}(Φ_t x_0, r/4)} (R - σ)_-^{n/2} dμ_t`
/// against `∫_{B_{g_0}(x_0, r)} (R_0 - σ)_-^{n/2} dμ_0`.
pub fn prop31_audit(
    traj: &FlowTrajectory,
    sigma: f64,
    x0: &[f64],
    r_scale: f64,
    cutoff: &CutoffParams,
) -> Result<Prop31Report> {
    let grid = traj.grid();
    check_radius(grid, r_scale)?;
    let n = grid.dim() as f64;
    let reference = Reference::Constant(sigma);
    let s0 = traj.initial();
    let d0 = evolving_distance(s0, x0)?;
    let rhs_initial = negative_part_norm(&s0.scalar, &reference, n / 2.0, &s0.g, &d0, r_scale)?;
    let energy = energy_trace(traj, sigma, x0, cutoff)?;
    let mut rows = Vec::new();
    for (k, st) in traj.states.iter().enumerate() {
        let dt = evolving_distance(st, x0)?;
        let lhs = negative_part_norm(&st.scalar, &reference, n / 2.0, &st.g, &dt, r_scale / 4.0)?;
        rows.push(Prop31Row {
            t: st.t,
            lhs,
            rhs_initial,
            energy: energy.values[k],
        });
    }
    let t0 = traj.fit_start();
    let e0 = energy.values[0];
    let mut c5: f64 = 0.0;
    let mut c6: f64 = 0.0;
    for (k, &t) in energy.times.iter().enumerate() {
        if t <= 0.0 || t < t0 {
            continue;
        }
        let e = energy.values[k];
        c5 = c5.max(energy.derivative[k] * t.sqrt() / (e + 1.0));
        c6 = c6.max(((e + 1.0) / (e0 + 1.0)).ln() / (t.sqrt() / r_scale));
    }
    let c7 = c7_for(&rows, c6, r_scale);
    let mut rep = Prop31Report {
        sigma,
        r_scale,
        rows,
        c5,
        c6,
        c7,
        holds: false,
    };
    // integrated energy inequality by direct substitution, then the ball estimate
    let energy_ok = energy.times.iter().zip(&energy.values).all(|(&t, &e)| {
        let f = (FIT_SLACK * c6 * t.sqrt() / r_scale).exp();
        e <= f * e0 + (f - 1.0) + 1e-12 * (1.0 + e)
    });
    rep.holds = energy_ok && c6.is_finite() && c7.is_finite() && rep.holds_with(FIT_SLACK * c6, FIT_SLACK * c7);
    Ok(rep)
}

/// Constants shared by a family: `C_6` is the largest member value and
/// `C_7` the smallest value working for every member given that `C_6`.
pub fn shared_prop31_constants(reports: &[Prop31Report]) -> (f64, f64) {
    let c6 = reports.iter().map(|r| r.c6).fold(0.0, f64::max);
    let c7 = reports.iter().map(|r| r.c7_given(c6)).fold(0.0, f64::max);
    (c6, c7)
}

/// Barrier audit of `(R - σ)_- <= L ε t^{δ-1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BarrierReport {
    pub delta: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub lambda: f64,
    /// first time `max (R-σ)_- >= Λ t^{-α}`, interpolated between snapshots
    pub first_violation_time: Option<f64>,
    pub l_barrier: f64,
    /// `(t, max (R-σ)_-)` at every snapshot
    pub profile: Vec<(f64, f64)>,
    pub slope: Option<f64>,
    pub slope_window: Option<(f64, f64)>,
    pub slope_points: usize,
    pub caveat: String,
}

/// Least-squares slope of `ln y` against `ln t` over points inside `window`.
pub fn loglog_slope(points: &[(f64, f64)], window: (f64, f64)) -> (Option<f64>, usize) {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, y)| *t >= window.0 * (1.0 - 1e-9) && *t <= window.1 * (1.0 + 1e-9) && *t > 0.0 && *y > 0.0)
        .map(|(t, y)| (t.ln(), y.ln()))
        .collect();
    let k = pts.len();
    if k < 3 {
        return (None, k);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (Some(sxy / sxx), k)
}

pub fn barrier_audit(
    traj: &FlowTrajectory,
    sigma: f64,
    delta: f64,
    epsilon: f64,
    lambda: Option<f64>,
    window: Option<(f64, f64)>,
) -> Result<BarrierReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LabError::arg(format!("delta {delta} not in (0, 1)")));
    }
    let alpha = 1.0 - delta;
    let profile: Vec<(f64, f64)> = traj
        .states
        .iter()
        .map(|s| (s.t, s.scalar.data().iter().map(|r| (sigma - r).max(0.0)).fold(0.0, f64::max)))
        .collect();
    let negative = profile.iter().any(|&(_, m)| m > 0.0);
    if epsilon <= 0.0 && negative {
        return Err(LabError::Inconsistency(format!(
            "epsilon = {epsilon} but (R - σ)_- reaches {:.3e}",
            profile.iter().map(|p| p.1).fold(0.0, f64::max)
        )));
    }
    let t0 = traj.fit_start();
    let l_barrier = if negative {
        profile
            .iter()
            .filter(|(t, _)| *t > 0.0 && *t >= t0)
            .map(|&(t, m)| m * t.powf(alpha) / epsilon)
            .fold(0.0, f64::max)
    } else {
        0.0
    };
    let lam = lambda.unwrap_or(std::f64::consts::E * l_barrier * epsilon.max(0.0));
    let mut first = None;
    let mut prev: Option<(f64, f64)> = None;
    for &(t, m) in profile.iter().filter(|(t, _)| *t > 0.0) {
        let excess = m - lam * t.powf(-alpha);
        // a zero deficit never reaches the threshold, even when Λ = 0
        if m > 0.0 && excess >= 0.0 {
            first = Some(match prev {
                Some((tp, ep)) if ep < 0.0 => {
                    // linear interpolation of the excess in ln t
                    let w = ep / (ep - excess);
                    (tp.ln() + w * (t.ln() - tp.ln())).exp()
                }
                _ => t,
            });
            break;
        }
        prev = Some((t, excess));
    }
    let (slope, slope_points) = match window {
        Some(w) => loglog_slope(&profile, w),
        None => (None, 0),
    };
    Ok(BarrierReport {
        delta,
        alpha,
        epsilon,
        lambda: lam,
        first_violation_time: first,
        l_barrier,
        profile,
        slope,
        slope_window: window,
        slope_points,
        caveat: "threshold time is resolved only down to the first snapshot".into(),
    })
}

/// Ball-inclusion check `B_{g_0}(x_0, r_0/8) ⊂ B_{g(t)}(Φ_t x_0, r_0/4)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallInclusionReport {
    pub r0: f64,
    /// fitted `S` (so the check time is `S r_0^2 / 2`)
    pub s: f64,
    pub t_target: f64,
    pub t_checked: f64,
    pub points_checked: usize,
    pub margin: f64,
    pub holds: bool,
}

/// `S` from the displacement fit: `√Λ c_disp √(S r_0^2) = r_0 / 10`,
/// where `Λ` is the largest bilipschitz factor along the run.
pub fn fitted_inclusion_time(traj: &FlowTrajectory, r0: f64) -> f64 {
    let lam = traj
        .states
        .iter()
        .map(|s| s.monitors.bilipschitz)
        .fold(1.0, f64::max);
    let c = lam.sqrt() * traj.fitted.c_disp;
    let t_end = traj.last().t;
    let s_r2 = if c > 0.0 { (r0 / (10.0 * c)).powi(2) } else { t_end };
    s_r2.min(t_end) / (r0 * r0)
}

pub fn ball_inclusion_check(traj: &FlowTrajectory, x0: &[f64], r0: f64) -> Result<BallInclusionReport> {
    let grid = traj.grid();
    check_radius(grid, r0 / 4.0)?;
    let s = fitted_inclusion_time(traj, r0);
    let t_target = 0.5 * s * r0 * r0;
    let st = traj
        .states
        .iter()
        .filter(|st| st.t <= t_target * (1.0 + 1e-12))
        .last()
        .expect("initial state has t = 0");
    let s0 = traj.initial();
    let d0 = evolving_distance(s0, x0)?;
    let dt = evolving_distance(st, x0)?;
    let mut margin = f64::INFINITY;
    let mut count = 0;
    for p in 0..grid.len() {
        if d0.at(p) < r0 / 8.0 {
            count += 1;
            margin = margin.min(r0 / 4.0 - dt.at(p));
        }
    }
    Ok(BallInclusionReport {
        r0,
        s,
        t_target,
        t_checked: st.t,
        points_checked: count,
        margin,
        holds: margin > 0.0,
    })
}

/// Minimal `C_0` in `d_{t_2} >= d_{t_1} - 2 C_0 (√t_2 - √t_1)` over the
/// tracked points, using the distances between images under the flow.
pub fn distance_drop_fit(traj: &FlowTrajectory, x0: &[f64]) -> Result<f64> {
    let grid = traj.grid();
    let mut per_state: Vec<(f64, Vec<f64>)> = Vec::new();
    for st in &traj.states {
        let dist = evolving_distance(st, x0)?;
        let vals = (0..st.tracker.len())
            .map(|i| dist.at_position(&st.g, &st.tracker.position(grid, i)))
            .collect();
        per_state.push((st.t, vals));
    }
    let mut c0: f64 = 0.0;
    for i in 0..per_state.len() {
        for j in i + 1..per_state.len() {
            let (t1, d1) = &per_state[i];
            let (t2, d2) = &per_state[j];
            let ds = t2.sqrt() - t1.sqrt();
            if ds <= 0.0 {
                continue;
            }
            for (a, b) in d1.iter().zip(d2) {
                if *a >= t1.sqrt() && *b >= t2.sqrt() {
                    c0 = c0.max((a - b) / (2.0 * ds));
                }
            }
        }
    }
    Ok(c0)
}

/// `min_t Vol_{g(t)}(B(Φ_t x_0, √t)) / t^{n/2}` over positive snapshot times.
pub fn volume_ratio_monitor(traj: &FlowTrajectory, x0: &[f64]) -> Result<f64> {
    let n = traj.grid().dim() as f64;
    let mut best = f64::INFINITY;
    for st in traj.states.iter().filter(|s| s.t > 0.0) {
        let r = st.t.sqrt();
        if r > st.g.grid().injectivity_radius() {
            continue;
        }
        let dist = evolving_distance(st, x0)?;
        let one = ScalarField::constant(st.g.grid(), 1.0);
        let vol = ball_integral(&one, &st.g, &dist, r)?;
        best = best.min(vol / st.t.powf(n / 2.0));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PeriodicGrid;
    use std::f64::consts::PI;

    #[test]
    fn profile_invariants() {
        let p = CutoffProfile::default();
        let c = p.check(10_000);
        assert!(c.all(), "{c:?}");
        assert!((c.max_slope - 3.75).abs() < 1e-3);
        assert_eq!(p.value(0.3), 1.0);
        assert_eq!(p.value(1.2), 0.0);
        // derivative consistency
        for s in [0.6, 0.75, 0.9] {
            let h = 1e-6;
            let fd = (p.value(s + h) - p.value(s - h)) / (2.0 * h);
            assert!((fd - p.derivative(s)).abs() < 1e-6);
            let fd2 = (p.derivative(s + h) - p.derivative(s - h)) / (2.0 * h);
            assert!((fd2 - p.second_derivative(s)).abs() < 1e-5);
        }
    }

    #[test]
    fn flat_ball_volume() {
        let grid = PeriodicGrid::cubic(3, 32, 4.0).unwrap();
        let g = MetricField::euclidean(&grid);
        let x0 = grid.index(&[16, 16, 16]);
        let d = distance_field(&g, x0);
        let one = ScalarField::constant(&grid, 1.0);
        let v = ball_integral(&one, &g, &d, 1.0).unwrap();
        let exact = 4.0 * PI / 3.0;
        // graph overestimate (<= 5%) shrinks the ball, pixelization adds ~3h/r
        assert!((v - exact).abs() < (3.0 * 0.05 + 3.0 * 0.125) * exact, "{v}");
        assert!(v < exact * 1.05);
        assert_eq!(ball_integral(&ScalarField::zeros(&grid), &g, &d, 1.0).unwrap(), 0.0);
        assert!(ball_integral(&one, &g, &d, 2.5).is_err());
        // monotone in r
        let v2 = ball_integral(&one, &g, &d, 1.5).unwrap();
        assert!(v2 >= v);
    }

    #[test]
    fn negative_part_of_constant_deficit_is_volume() {
        let grid = PeriodicGrid::cubic(3, 16, 4.0).unwrap();
        let g = MetricField::euclidean(&grid);
        let d = distance_field(&g, 0);
        let r = ScalarField::constant(&grid, -1.0);
        let one = ScalarField::constant(&grid, 1.0);
        let vol = ball_integral(&one, &g, &d, 1.0).unwrap();
        let v = negative_part_norm(&r, &Reference::Constant(0.0), 1.5, &g, &d, 1.0).unwrap();
        assert!((v - vol).abs() < 1e-12);
        let z = negative_part_norm(&r, &Reference::Constant(-2.0), 1.5, &g, &d, 1.0).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (1..20).map(|i| {
            let t = 0.01 * i as f64;
            (t, 3.0 * t.powf(-0.75))
        }).collect();
        let (s, k) = loglog_slope(&pts, (0.02, 0.1));
        assert_eq!(k, 9);
        assert!((s.unwrap() + 0.75).abs() < 1e-12);
    }

    #[test]
    fn nonuniform_derivative_is_exact_on_quadratics() {
        let t = [0.0, 0.1, 0.3, 0.35, 0.8];
        let y: Vec<f64> = t.iter().map(|x| 2.0 * x * x - x + 1.0).collect();
        let d = nonuniform_derivative(&t, &y);
        for i in 1..4 {
            assert!((d[i] - (4.0 * t[i] - 1.0)).abs() < 1e-12);
        }
    }
}
