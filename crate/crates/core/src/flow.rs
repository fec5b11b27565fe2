//! Ricci-DeTurck flow `∂_t g = -2 Ric + ∇_i W_j + ∇_j W_i`,
//! `W^k = g^{pq} (Γ^k_{pq} - Γ(h)^k_{pq})`, with the DeTurck diffeomorphism
//! `∂_t Φ = -W(Φ)` tracked on a set of points.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{self, connection, ricci, trace, T3, T4, Z3, Z4};
use crate::error::{LabError, Result};
use crate::field::{sym_index, sym_len, ScalarField, SymTensorField, VectorField};
use crate::grid::{PeriodicGrid, MAX_DIM};
use crate::linalg::{self, Mat};
use crate::metric::MetricField;
use crate::stencil::{central_derivative, mixed_derivative, JetSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    #[default]
    Rk2,
    Rk4,
}

impl Integrator {
    pub fn order(self) -> u32 {
        match self {
            Integrator::Rk2 => 2,
            Integrator::Rk4 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub t_end: f64,
    pub cfl_safety: f64,
    pub dt_max: f64,
    pub integrator: Integrator,
    /// Steps between entries of the monitor series.
    pub monitor_every: usize,
    /// Largest accepted bilipschitz factor of the initial metric.
    pub max_bilipschitz: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            t_end: 0.1,
            cfl_safety: 0.2,
            dt_max: 1e-2,
            integrator: Integrator::Rk2,
            monitor_every: 10,
            max_bilipschitz: 20.0,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(LabError::arg(format!("cfl_safety {} not in (0, 1]", self.cfl_safety)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(LabError::arg(format!("t_end {} must be positive", self.t_end)));
        }
        if !(self.dt_max > 0.0) {
            return Err(LabError::arg("dt_max must be positive"));
        }
        if self.monitor_every == 0 {
            return Err(LabError::arg("monitor_every must be at least 1"));
        }
        Ok(())
    }
}

/// Largest stable step `cfl h^2 / (2 n λ_max(g^{-1}))`.
pub fn cfl_limit(g: &MetricField, cfl: f64) -> f64 {
    let h = g.grid().min_spacing();
    cfl * h * h / (2.0 * g.dim() as f64 * g.max_inverse_eigenvalue())
}

/// Background connection `Γ(h)` and its derivatives, precomputed once.
#[derive(Debug)]
pub struct Background {
    metric: MetricField,
    gamma: Vec<f64>,
    dgamma: Vec<f64>,
    flat: bool,
}

impl Background {
    pub fn new(h: MetricField) -> Self {
        let grid = h.grid().clone();
        let d = grid.dim();
        let sampler = JetSampler::new(&grid, sym_len(d));
        let (d3, d4) = (d * d * d, d * d * d * d);
        let per: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len())
            .into_par_iter()
            .map(|p| {
                let jet = sampler.jet(h.base().data(), p);
                let c = connection(&jet, &h.inverse_matrix(p), d, true);
                let mut g3 = Vec::with_capacity(d3);
                let mut g4 = Vec::with_capacity(d4);
                for k in 0..d {
                    for i in 0..d {
                        for j in 0..d {
                            g3.push(c.gamma[k][i][j]);
                            for m in 0..d {
                                g4.push(c.dgamma[m][k][i][j]);
                            }
                        }
                    }
                }
                (g3, g4)
            })
            .collect();
        let mut gamma = Vec::with_capacity(grid.len() * d3);
        let mut dgamma = Vec::with_capacity(grid.len() * d4);
        for (a, b) in per {
            gamma.extend(a);
            dgamma.extend(b);
        }
        let flat = gamma.iter().chain(&dgamma).all(|&v| v == 0.0);
        if flat {
            gamma = Vec::new();
            dgamma = Vec::new();
        }
        Self {
            metric: h,
            gamma,
            dgamma,
            flat,
        }
    }

    pub fn metric(&self) -> &MetricField {
        &self.metric
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    fn at(&self, p: usize) -> (T3, T4) {
        let mut g3 = Z3;
        let mut g4 = Z4;
        if self.flat {
            return (g3, g4);
        }
        let d = self.metric.dim();
        let (d3, d4) = (d * d * d, d * d * d * d);
        let a = &self.gamma[p * d3..(p + 1) * d3];
        let b = &self.dgamma[p * d4..(p + 1) * d4];
        let mut ia = 0;
        let mut ib = 0;
        for k in 0..d {
            for i in 0..d {
                for j in 0..d {
                    g3[k][i][j] = a[ia];
                    ia += 1;
                    for m in 0..d {
                        g4[m][k][i][j] = b[ib];
                        ib += 1;
                    }
                }
            }
        }
        (g3, g4)
    }
}

/// `W^k = g^{pq}(Γ^k_{pq} - Γ(h)^k_{pq})` at every point.
pub fn deturck_vector(g: &MetricField, h: &MetricField) -> Result<VectorField> {
    if g.grid() != h.grid() {
        return Err(LabError::arg("metric and background live on different grids"));
    }
    let bg = Background::new(h.clone());
    let (_, w, _) = evaluate(g.base().data(), g.grid(), &bg, true)?;
    Ok(w)
}

/// Evaluates the flow right-hand side on packed metric data. Also returns
/// `W` and the scalar curvature as by-products.
fn evaluate(
    data: &[f64],
    grid: &PeriodicGrid,
    bg: &Background,
    want_w_only: bool,
) -> Result<(Vec<f64>, VectorField, ScalarField)> {
    let d = grid.dim();
    let s = sym_len(d);
    let sampler = JetSampler::new(grid, s);
    let mut rhs = vec![0.0; grid.len() * s];
    let mut w = VectorField::zeros(grid);
    let mut r = ScalarField::zeros(grid);
    rhs.par_chunks_mut(s)
        .zip(w.data_mut().par_chunks_mut(d))
        .zip(r.data_mut().par_iter_mut())
        .enumerate()
        .for_each(|(p, ((out, wo), ro))| match d {
            2 => rhs_point::<2>(data, p, &sampler, bg, want_w_only, out, wo, ro),
            3 => rhs_point::<3>(data, p, &sampler, bg, want_w_only, out, wo, ro),
            _ => rhs_point::<4>(data, p, &sampler, bg, want_w_only, out, wo, ro),
        });
    Ok((rhs, w, r))
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn rhs_point<const D: usize>(
    data: &[f64],
    p: usize,
    sampler: &JetSampler,
    bg: &Background,
    want_w_only: bool,
    out: &mut [f64],
    wo: &mut [f64],
    ro: &mut f64,
) {
    let d = D;
    let s = sym_len(d);
    let gp = linalg::unpack(&data[p * s..(p + 1) * s], d);
    let Some((ginv, _)) = linalg::inverse(&gp, d).filter(|(_, det)| *det > 0.0) else {
        out.iter_mut().for_each(|v| *v = f64::NAN);
        *ro = f64::NAN;
        return;
    };
    let jet = sampler.jet(data, p);
    let c = connection(&jet, &ginv, d, !want_w_only);
    let (hg, hdg) = bg.at(p);
    // D^k_{pq} = Γ^k_{pq} - Γ(h)^k_{pq}
    let mut dk = Z3;
    let mut wu = [0.0; MAX_DIM];
    for k in 0..d {
        for a in 0..d {
            for b in 0..d {
                dk[k][a][b] = c.gamma[k][a][b] - hg[k][a][b];
            }
        }
        wu[k] = trace(&ginv, &dk[k], d);
        wo[k] = wu[k];
    }
    if want_w_only {
        return;
    }
    let ric = ricci(&c, d);
    *ro = trace(&ginv, &ric, d);
    // ∂_m W^k
    let mut dw = [[0.0; MAX_DIM]; MAX_DIM];
    for m in 0..d {
        // ∂_m g^{pq} = -g^{pa} ∂_m g_{ab} g^{bq}
        let mut t: Mat = linalg::ZERO;
        for a in 0..d {
            for q in 0..d {
                t[a][q] = (0..d).map(|b| c.dg[m][a][b] * ginv[b][q]).sum();
            }
        }
        let mut dginv: Mat = linalg::ZERO;
        for pp in 0..d {
            for q in 0..d {
                dginv[pp][q] = -(0..d).map(|a| ginv[pp][a] * t[a][q]).sum::<f64>();
            }
        }
        for k in 0..d {
            let mut v = trace(&dginv, &dk[k], d);
            for pp in 0..d {
                for q in 0..d {
                    v += ginv[pp][q] * (c.dgamma[m][k][pp][q] - hdg[m][k][pp][q]);
                }
            }
            dw[m][k] = v;
        }
    }
    // W_j and ∂_i W_j
    let mut wl = [0.0; MAX_DIM];
    for j in 0..d {
        wl[j] = (0..d).map(|k| gp[j][k] * wu[k]).sum();
    }
    let mut nabla: Mat = linalg::ZERO;
    for i in 0..d {
        for j in 0..d {
            let mut v = 0.0;
            for k in 0..d {
                v += c.dg[i][j][k] * wu[k] + gp[j][k] * dw[i][k];
            }
            for m in 0..d {
                v -= c.gamma[m][i][j] * wl[m];
            }
            nabla[i][j] = v;
        }
    }
    for i in 0..d {
        for j in i..d {
            out[sym_index(i, j, d)] = -2.0 * ric[i][j] + nabla[i][j] + nabla[j][i];
        }
    }
}

/// Tracked samples of the DeTurck diffeomorphism: `Φ_t(x) = x + disp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracker {
    dim: usize,
    sources: Vec<f64>,
    disp: Vec<f64>,
    /// Set when the sources are exactly the grid points in grid order.
    full_grid: bool,
}

impl Tracker {
    pub fn new(dim: usize, sources: Vec<Vec<f64>>) -> Result<Self> {
        if sources.iter().any(|s| s.len() != dim) {
            return Err(LabError::arg("tracker source with wrong dimension"));
        }
        let flat: Vec<f64> = sources.into_iter().flatten().collect();
        Ok(Self {
            dim,
            disp: vec![0.0; flat.len()],
            sources: flat,
            full_grid: false,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            sources: Vec::new(),
            disp: Vec::new(),
            full_grid: false,
        }
    }

    /// One tracked point per grid point.
    pub fn full_grid(grid: &PeriodicGrid) -> Self {
        let sources: Vec<f64> = (0..grid.len()).flat_map(|p| grid.position(p)).collect();
        Self {
            dim: grid.dim(),
            disp: vec![0.0; sources.len()],
            sources,
            full_grid: true,
        }
    }

    /// Each center plus its axis neighbours at distance `h_a` (for Jacobians).
    pub fn with_probes(grid: &PeriodicGrid, centers: &[Vec<f64>]) -> Result<Self> {
        let d = grid.dim();
        let mut pts = Vec::new();
        for c in centers {
            pts.push(c.clone());
            for a in 0..d {
                for s in [-1.0, 1.0] {
                    let mut q = c.clone();
                    q[a] += s * grid.spacing(a);
                    pts.push(q);
                }
            }
        }
        Self::new(d, pts)
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.sources.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full_grid(&self) -> bool {
        self.full_grid
    }

    pub fn source(&self, i: usize) -> &[f64] {
        &self.sources[i * self.dim..(i + 1) * self.dim]
    }

    /// Unwrapped displacement `Φ_t(x) - x`.
    pub fn displacement(&self, i: usize) -> &[f64] {
        &self.disp[i * self.dim..(i + 1) * self.dim]
    }

    /// `Φ_t(x)` wrapped into the torus.
    pub fn position(&self, grid: &PeriodicGrid, i: usize) -> Vec<f64> {
        let mut x: Vec<f64> = self
            .source(i)
            .iter()
            .zip(self.displacement(i))
            .map(|(a, b)| a + b)
            .collect();
        grid.wrap_position(&mut x);
        x
    }

    /// Index of the tracked point whose source is `x` (up to wraparound).
    pub fn find(&self, grid: &PeriodicGrid, x: &[f64]) -> Option<usize> {
        let tol = 1e-9 * grid.min_spacing();
        (0..self.len()).find(|&i| {
            grid.displacement(self.source(i), x)
                .iter()
                .all(|v| v.abs() <= tol)
        })
    }

    /// All displacements, point-major.
    pub fn displacements(&self) -> &[f64] {
        &self.disp
    }

    /// Replaces the displacements (e.g. when loading a stored trajectory).
    pub fn with_displacements(mut self, disp: Vec<f64>) -> Result<Self> {
        if disp.len() != self.disp.len() {
            return Err(LabError::arg("displacement count does not match the tracker"));
        }
        self.disp = disp;
        Ok(self)
    }

    pub fn max_displacement(&self) -> f64 {
        (0..self.len())
            .map(|i| self.displacement(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Velocity `-W` at every tracked point under the current offsets.
    fn velocity(&self, w: &VectorField, disp: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; disp.len()];
        out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
            let x: Vec<f64> = (0..d).map(|a| self.sources[i * d + a] + disp[i * d + a]).collect();
            w.interpolate(&x, o);
            o.iter_mut().for_each(|v| *v = -*v);
        });
        out
    }
}

/// Advances tracker offsets by one explicit step of the same RK scheme as
/// the metric, with `W` frozen at the given stage fields.
pub fn advect_diffeo(tracker: &mut Tracker, stage_w: &[VectorField], integrator: Integrator, dt: f64) {
    if tracker.is_empty() {
        return;
    }
    let base = tracker.disp.clone();
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + s * y).collect()
    };
    match integrator {
        Integrator::Rk2 => {
            let k1 = tracker.velocity(&stage_w[0], &base);
            let x1 = axpy(&base, dt, &k1);
            let k2 = tracker.velocity(&stage_w[1], &x1);
            for i in 0..base.len() {
                tracker.disp[i] = base[i] + 0.5 * dt * (k1[i] + k2[i]);
            }
        }
        Integrator::Rk4 => {
            let k1 = tracker.velocity(&stage_w[0], &base);
            let k2 = tracker.velocity(&stage_w[1], &axpy(&base, 0.5 * dt, &k1));
            let k3 = tracker.velocity(&stage_w[2], &axpy(&base, 0.5 * dt, &k2));
            let k4 = tracker.velocity(&stage_w[3], &axpy(&base, dt, &k3));
            for i in 0..base.len() {
                tracker.disp[i] = base[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
}

/// Scalar monitors of one flow state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitors {
    pub t: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub bilipschitz: f64,
    /// `t · max |Dg|^2`
    pub t_dg2: f64,
    /// `t · max |D^2 g|`
    pub t_d2g: f64,
    /// `t · max |Rm|`
    pub t_rm: f64,
    pub volume: f64,
    pub max_w: f64,
    pub max_displacement: f64,
    /// `max |D^4 g|` over pure axis derivatives (sets the discretization tolerance)
    pub max_d4g: f64,
}

/// Snapshot of the flow at a diagnostic time.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub g: MetricField,
    pub background: Arc<Background>,
    pub tracker: Tracker,
    pub scalar: ScalarField,
    pub rm_norm: ScalarField,
    pub w: VectorField,
    pub monitors: Monitors,
}

/// Fitted constants of the audited inequalities; all are minimal over the sampled data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    pub a_deriv: f64,
    pub a_rm: f64,
    /// `|Φ_t(x) - x| <= c_disp √t`
    pub c_disp: f64,
    pub c0_dist: Option<f64>,
    pub c_gauss: Option<f64>,
    pub c6: Option<f64>,
    pub c7: Option<f64>,
    pub l_barrier: Option<f64>,
}

/// Light per-step record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub r_min: f64,
    pub r_max: f64,
}

#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub states: Vec<FlowState>,
    pub params: FlowParams,
    pub fitted: FittedConstants,
    pub series: Vec<SeriesPoint>,
    pub dt_initial: f64,
    pub steps: usize,
}

impl FlowTrajectory {
    pub fn grid(&self) -> &PeriodicGrid {
        self.states[0].g.grid()
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn initial(&self) -> &FlowState {
        &self.states[0]
    }

    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory has at least the initial state")
    }

    /// Snapshot nearest to `t`.
    pub fn nearest(&self, t: f64) -> &FlowState {
        self.states
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("nonempty")
    }

    /// A stationary trajectory: `g` held fixed (as its own background) at the
    /// given times. Used for static-metric kernel runs.
    pub fn frozen(g: MetricField, times: &[f64], tracker: Tracker) -> Result<Self> {
        let schedule = DiagnosticSchedule::new(times.to_vec())?;
        let bg = Arc::new(Background::new(g.clone()));
        let mut states = Vec::with_capacity(schedule.times.len() + 1);
        if schedule.times.first() != Some(&0.0) {
            states.push(FlowState::new(0.0, g.clone(), bg.clone(), tracker.clone())?);
        }
        for &t in &schedule.times {
            states.push(FlowState::new(t, g.clone(), bg.clone(), tracker.clone())?);
        }
        let t_end = schedule.times.last().copied().unwrap_or(0.0);
        Ok(Self {
            states,
            params: FlowParams {
                t_end,
                ..FlowParams::default()
            },
            fitted: FittedConstants::default(),
            series: Vec::new(),
            dt_initial: 0.0,
            steps: 0,
        })
    }

    /// Earliest time entering the fits of `t^{-1}`-type monitors.
    pub fn fit_start(&self) -> f64 {
        4.0 * self.dt_initial
    }
}

/// A run that stopped early; the partial trajectory is kept.
#[derive(Debug)]
pub struct FlowAbort {
    pub error: LabError,
    pub partial: FlowTrajectory,
}

impl std::fmt::Display for FlowAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (after {} snapshots, t = {:.4e})",
            self.error,
            self.partial.states.len(),
            self.partial.last().t
        )
    }
}

impl std::error::Error for FlowAbort {}

/// Snapshot times of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSchedule {
    pub times: Vec<f64>,
}

impl DiagnosticSchedule {
    pub fn new(mut times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(LabError::arg("snapshot times must be positive"));
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        Ok(Self { times })
    }

    /// `count` log-spaced times from `t_first` to `t_end` inclusive.
    pub fn log_spaced(t_first: f64, t_end: f64, count: usize) -> Result<Self> {
        if !(t_first > 0.0 && t_end >= t_first) || count == 0 {
            return Err(LabError::arg("log-spaced schedule needs 0 < t_first <= t_end"));
        }
        if count == 1 {
            return Self::new(vec![t_end]);
        }
        let r = (t_end / t_first).ln() / (count - 1) as f64;
        let mut v: Vec<f64> = (0..count).map(|i| t_first * (r * i as f64).exp()).collect();
        v[count - 1] = t_end;
        Self::new(v)
    }

    pub fn linear(t_end: f64, count: usize) -> Result<Self> {
        Self::new((1..=count).map(|i| t_end * i as f64 / count as f64).collect())
    }
}

/// One step of the flow; returns the new metric, the stage `W` fields and
/// the stage-0 scalar curvature.
pub struct StepOutput {
    pub g: MetricField,
    pub stage_w: Vec<VectorField>,
    pub scalar: ScalarField,
}

fn axpy_metric(base: &[f64], dt: f64, k: &[f64]) -> Vec<f64> {
    base.iter().zip(k).map(|(a, b)| a + dt * b).collect()
}

fn check_finite(v: &[f64], grid: &PeriodicGrid, t: f64, nc: usize) -> Result<()> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(LabError::Degeneracy {
            t,
            point: grid.coords(i / nc),
            min_eigenvalue: f64::NAN,
        });
    }
    Ok(())
}

/// Advances `g` by `dt`. `cfl` is the safety factor used for the step check.
pub fn step_metric(
    g: &MetricField,
    bg: &Background,
    integrator: Integrator,
    dt: f64,
    t: f64,
    cfl: f64,
) -> Result<StepOutput> {
    let limit = cfl_limit(g, cfl);
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(LabError::arg(format!(
            "dt = {dt:e} violates the CFL bound {limit:e}"
        )));
    }
    let grid = g.grid();
    let s = sym_len(grid.dim());
    let base = g.base().data();
    let (k1, w1, r1) = evaluate(base, grid, bg, false)?;
    check_finite(&k1, grid, t, s)?;
    let new = match integrator {
        Integrator::Rk2 => {
            let g1 = axpy_metric(base, dt, &k1);
            let (k2, w2, _) = evaluate(&g1, grid, bg, false)?;
            check_finite(&k2, grid, t + dt, s)?;
            let out: Vec<f64> = (0..base.len())
                .map(|i| base[i] + 0.5 * dt * (k1[i] + k2[i]))
                .collect();
            (out, vec![w1, w2])
        }
        Integrator::Rk4 => {
            let (k2, w2, _) = evaluate(&axpy_metric(base, 0.5 * dt, &k1), grid, bg, false)?;
            check_finite(&k2, grid, t + 0.5 * dt, s)?;
            let (k3, w3, _) = evaluate(&axpy_metric(base, 0.5 * dt, &k2), grid, bg, false)?;
            check_finite(&k3, grid, t + 0.5 * dt, s)?;
            let (k4, w4, _) = evaluate(&axpy_metric(base, dt, &k3), grid, bg, false)?;
            check_finite(&k4, grid, t + dt, s)?;
            let out: Vec<f64> = (0..base.len())
                .map(|i| base[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect();
            (out, vec![w1, w2, w3, w4])
        }
    };
    check_finite(&new.0, grid, t + dt, s)?;
    let field = SymTensorField::from_data(grid, new.0)?;
    let g_new = MetricField::new(field).map_err(|e| match e {
        LabError::Geometry {
            point,
            min_eigenvalue,
        } => LabError::Degeneracy {
            t: t + dt,
            point,
            min_eigenvalue,
        },
        other => other,
    })?;
    Ok(StepOutput {
        g: g_new,
        stage_w: new.1,
        scalar: r1,
    })
}

/// Right-hand side `-2 Ric + ∇_i W_j + ∇_j W_i` as a field.
pub fn flow_rhs(g: &MetricField, bg: &Background) -> Result<SymTensorField> {
    let (k, _, _) = evaluate(g.base().data(), g.grid(), bg, false)?;
    SymTensorField::from_data(g.grid(), k)
}

impl FlowState {
    /// State at time `t` with all diagnostics computed from `g`.
    pub fn new(t: f64, g: MetricField, background: Arc<Background>, tracker: Tracker) -> Result<Self> {
        if g.grid() != background.metric().grid() {
            return Err(LabError::arg("metric and background live on different grids"));
        }
        let bundle = curvature::curvature(&g);
        let (_, w, _) = evaluate(g.base().data(), g.grid(), &background, true)?;
        let monitors = compute_monitors(t, &g, &bundle.scalar, &bundle.rm_norm, &w, &tracker)?;
        Ok(Self {
            t,
            g,
            background,
            tracker,
            scalar: bundle.scalar,
            rm_norm: bundle.rm_norm,
            w,
            monitors,
        })
    }

    /// One step of size `dt`; metric and tracker use the same stage structure.
    pub fn step(&self, dt: f64, params: &FlowParams) -> Result<FlowState> {
        let out = step_metric(&self.g, &self.background, params.integrator, dt, self.t, params.cfl_safety)?;
        let mut tracker = self.tracker.clone();
        advect_diffeo(&mut tracker, &out.stage_w, params.integrator, dt);
        FlowState::new(self.t + dt, out.g, self.background.clone(), tracker)
    }
}

fn compute_monitors(
    t: f64,
    g: &MetricField,
    scalar: &ScalarField,
    rm: &ScalarField,
    w: &VectorField,
    tracker: &Tracker,
) -> Result<Monitors> {
    let grid = g.grid();
    let d = grid.dim();
    let base = g.base();
    let n = grid.len();
    let mut dg2 = vec![0.0; n];
    let mut d2g = vec![0.0; n];
    let mut d4g: f64 = 0.0;
    let weight = |i: usize, j: usize| if i == j { 1.0 } else { 2.0 };
    for a in 0..d {
        let da = central_derivative(base, a, 1)?;
        for p in 0..n {
            for i in 0..d {
                for j in i..d {
                    let v = da.at(p)[sym_index(i, j, d)];
                    dg2[p] += weight(i, j) * v * v;
                }
            }
        }
        for b in a..d {
            let dab = mixed_derivative(base, a, b)?;
            let wab = if a == b { 1.0 } else { 2.0 };
            for p in 0..n {
                for i in 0..d {
                    for j in i..d {
                        let v = dab.at(p)[sym_index(i, j, d)];
                        d2g[p] += wab * weight(i, j) * v * v;
                    }
                }
            }
            if a == b {
                let d4 = central_derivative(&dab, a, 2)?;
                d4g = d4g.max(d4.max_abs());
            }
        }
    }
    let max_dg2 = dg2.iter().cloned().fold(0.0, f64::max);
    let max_d2g = d2g.iter().map(|v| v.sqrt()).fold(0.0, f64::max);
    let mut max_w: f64 = 0.0;
    for p in 0..n {
        let gm = g.matrix(p);
        let wp = w.at(p);
        max_w = max_w.max(crate::metric::metric_length(&gm, wp, d));
    }
    Ok(Monitors {
        t,
        r_min: scalar.min(),
        r_max: scalar.max(),
        bilipschitz: g.bilipschitz(),
        t_dg2: t * max_dg2,
        t_d2g: t * max_d2g,
        t_rm: t * rm.max(),
        volume: g.volume(),
        max_w,
        max_displacement: tracker.max_displacement(),
        max_d4g: d4g,
    })
}

/// Flows `g0` to `params.t_end`, recording a snapshot at every schedule time.
pub fn run(
    g0: MetricField,
    h: MetricField,
    params: &FlowParams,
    schedule: &DiagnosticSchedule,
    tracker: Tracker,
) -> std::result::Result<FlowTrajectory, Box<FlowAbort>> {
    let in_grid = h.grid().clone();
    let empty = |error: LabError| -> Box<FlowAbort> {
        // nothing was flowed; the partial trajectory is a flat placeholder
        let grid = in_grid.clone();
        let bg = Arc::new(Background::new(MetricField::euclidean(&grid)));
        let st = FlowState::new(0.0, MetricField::euclidean(&grid), bg, Tracker::empty(grid.dim()))
            .expect("flat state");
        Box::new(FlowAbort {
            error,
            partial: FlowTrajectory {
                states: vec![st],
                params: params.clone(),
                fitted: FittedConstants::default(),
                series: Vec::new(),
                dt_initial: 0.0,
                steps: 0,
            },
        })
    };
    if let Err(e) = params.validate() {
        return Err(empty(e));
    }
    if g0.grid() != h.grid() {
        return Err(empty(LabError::arg("initial metric and background on different grids")));
    }
    if g0.bilipschitz() > params.max_bilipschitz {
        return Err(empty(LabError::arg(format!(
            "initial bilipschitz factor {:.3} exceeds the configured bound {}",
            g0.bilipschitz(),
            params.max_bilipschitz
        ))));
    }
    let bg = Arc::new(Background::new(h));
    let dt_initial = cfl_limit(&g0, params.cfl_safety).min(params.dt_max);
    let first = match FlowState::new(0.0, g0, bg, tracker) {
        Ok(s) => s,
        Err(e) => return Err(empty(e)),
    };
    let mut traj = FlowTrajectory {
        states: vec![first.clone()],
        params: params.clone(),
        fitted: FittedConstants::default(),
        series: Vec::new(),
        dt_initial,
        steps: 0,
    };
    let mut targets: Vec<f64> = schedule
        .times
        .iter()
        .cloned()
        .filter(|&t| t < params.t_end)
        .collect();
    targets.push(params.t_end);

    let mut g = first.g.clone();
    let mut trk = first.tracker.clone();
    let bgr = first.background.clone();
    let mut t = 0.0;
    let mut step = 0usize;
    for &target in &targets {
        while t < target * (1.0 - 1e-13) {
            let limit = cfl_limit(&g, params.cfl_safety).min(params.dt_max);
            let remaining = target - t;
            // land on the snapshot time exactly, avoiding a sliver step
            let dt = if remaining <= limit {
                remaining
            } else if remaining < 2.0 * limit {
                0.5 * remaining
            } else {
                limit
            };
            let out = match step_metric(&g, &bgr, params.integrator, dt, t, params.cfl_safety) {
                Ok(o) => o,
                Err(e) => {
                    traj.steps = step;
                    traj.fitted = fit_constants(&traj);
                    return Err(Box::new(FlowAbort { error: e, partial: traj }));
                }
            };
            advect_diffeo(&mut trk, &out.stage_w, params.integrator, dt);
            if step % params.monitor_every == 0 {
                traj.series.push(SeriesPoint {
                    step,
                    t,
                    dt,
                    r_min: out.scalar.min(),
                    r_max: out.scalar.max(),
                });
            }
            g = out.g;
            t = if remaining <= limit { target } else { t + dt };
            step += 1;
        }
        match FlowState::new(t, g.clone(), bgr.clone(), trk.clone()) {
            Ok(s) => traj.states.push(s),
            Err(e) => {
                traj.steps = step;
                traj.fitted = fit_constants(&traj);
                return Err(Box::new(FlowAbort { error: e, partial: traj }));
            }
        }
    }
    traj.steps = step;
    traj.fitted = fit_constants(&traj);
    Ok(traj)
}

fn fit_constants(traj: &FlowTrajectory) -> FittedConstants {
    let t0 = traj.fit_start();
    let mut f = FittedConstants::default();
    for s in traj.states.iter().filter(|s| s.t >= t0 && s.t > 0.0) {
        let m = &s.monitors;
        f.a_deriv = f.a_deriv.max(m.t_dg2.max(m.t_d2g));
        f.a_rm = f.a_rm.max(m.t_rm);
        f.c_disp = f.c_disp.max(m.max_displacement / s.t.sqrt());
    }
    f
}

/// `ĝ(t) = Φ_t^* g(t)` at probe points. The Jacobian of `Φ_t` is the
/// central difference over tracked neighbours at spacing `h`.
pub fn pullback_metric(state: &FlowState, probes: &[Vec<f64>]) -> Result<Vec<Mat>> {
    let grid = state.g.grid();
    let d = grid.dim();
    let tr = &state.tracker;
    let mut out = Vec::with_capacity(probes.len());
    for x in probes {
        let ic = tr
            .find(grid, x)
            .ok_or_else(|| LabError::arg(format!("probe {x:?} is not tracked")))?;
        let mut jac = [[0.0; MAX_DIM]; MAX_DIM]; // jac[a][i] = ∂Φ^a/∂x^i
        for i in 0..d {
            let h = grid.spacing(i);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let ip = tr
                .find(grid, &xp)
                .ok_or_else(|| LabError::arg(format!("probe {x:?} lacks tracked neighbours")))?;
            let im = tr
                .find(grid, &xm)
                .ok_or_else(|| LabError::arg(format!("probe {x:?} lacks tracked neighbours")))?;
            for a in 0..d {
                let dd = tr.displacement(ip)[a] - tr.displacement(im)[a];
                jac[a][i] = if a == i { 1.0 } else { 0.0 } + dd / (2.0 * h);
            }
        }
        let gx = state.g.interpolate(&tr.position(grid, ic));
        let mut gh = linalg::ZERO;
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        v += jac[a][i] * jac[b][j] * gx[a][b];
                    }
                }
                gh[i][j] = v;
            }
        }
        out.push(gh);
    }
    Ok(out)
}

/// `Φ_t^* g(t)` on the whole grid; needs a full-grid tracker. The Jacobian
/// uses the grid's central stencil on the periodic displacement field.
pub fn pullback_field(state: &FlowState) -> Result<MetricField> {
    let grid = state.g.grid();
    let tr = &state.tracker;
    if !tr.is_full_grid() {
        return Err(LabError::arg("pullback on the grid needs a full-grid tracker"));
    }
    let d = grid.dim();
    let disp = VectorField::from_data(grid, tr.disp.clone())?;
    let ddisp: Vec<VectorField> = (0..d)
        .map(|a| central_derivative(&disp, a, 1))
        .collect::<Result<_>>()?;
    let mut base = SymTensorField::zeros(grid);
    let s = sym_len(d);
    base.data_mut().par_chunks_mut(s).enumerate().for_each(|(p, o)| {
        let mut jac = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..d {
            for a in 0..d {
                jac[a][i] = if a == i { 1.0 } else { 0.0 } + ddisp[i].at(p)[a];
            }
        }
        let gx = state.g.interpolate(&tr.position(grid, p));
        for i in 0..d {
            for j in i..d {
                let mut v = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        v += jac[a][i] * jac[b][j] * gx[a][b];
                    }
                }
                o[sym_index(i, j, d)] = v;
            }
        }
    });
    MetricField::new(base)
}
