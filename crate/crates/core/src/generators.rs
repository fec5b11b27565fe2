//! Conformal spike families `g_i = e^{2 u_i} δ` and glued metrics.

use serde::{Deserialize, Serialize};

use crate::analysis::{negative_part_norm, weighted_l1_sup, CutoffProfile, Reference};
use crate::curvature::scalar_curvature;
use crate::distance::distance_field;
use crate::error::{LabError, Result};
use crate::field::{ScalarField, SymTensorField};
use crate::grid::PeriodicGrid;
use crate::linalg;
use crate::metric::MetricField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    /// compact bump `u = -a (1 - |x|^2/ρ^2)_+^3`
    Lp,
    /// core-regularized power law `u = -a (K - (s(x) + ρ^2)^δ)`
    WeightedL1,
}

/// Schedules `a_i = a0 i^{-a_power}`, `ρ_i = rho0 i^{-rho_power}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeFamilySpec {
    pub dim: usize,
    pub kind: FamilyKind,
    pub a0: f64,
    pub a_power: f64,
    pub rho0: f64,
    pub rho_power: f64,
    /// spike center; `None` puts it at the middle of the torus
    pub center: Option<Vec<f64>>,
    /// κ (Lp family) or σ (weighted-L¹ family)
    pub target: f64,
    pub delta: f64,
    pub first: usize,
    pub last: usize,
    /// ball radius of the measured Lp functional
    pub radius: f64,
    /// radii of the weighted-L¹ scan
    pub scan_radii: Vec<f64>,
}

impl SpikeFamilySpec {
    pub fn lp(dim: usize, members: usize) -> Self {
        Self {
            dim,
            kind: FamilyKind::Lp,
            a0: 1.0,
            a_power: 1.0,
            rho0: 1.0,
            rho_power: 0.25,
            center: None,
            target: 0.0,
            delta: 0.25,
            first: 1,
            last: members,
            radius: 1.0,
            scan_radii: default_scan_radii(),
        }
    }

    pub fn weighted_l1(dim: usize, members: usize, delta: f64) -> Self {
        Self {
            kind: FamilyKind::WeightedL1,
            a0: 0.2,
            rho0: 0.75,
            delta,
            ..Self::lp(dim, members)
        }
    }

    pub fn members(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn amplitude(&self, i: usize) -> f64 {
        self.a0 * (i as f64).powf(-self.a_power)
    }

    pub fn width(&self, i: usize) -> f64 {
        self.rho0 * (i as f64).powf(-self.rho_power)
    }

    pub fn center_on(&self, grid: &PeriodicGrid) -> Vec<f64> {
        self.center
            .clone()
            .unwrap_or_else(|| grid.side().iter().map(|l| 0.5 * l).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.first == 0 {
            return Err(LabError::arg("member indices start at 1"));
        }
        if !(self.a0 >= 0.0 && self.rho0 > 0.0) {
            return Err(LabError::arg("amplitude must be nonnegative and width positive"));
        }
        if self.kind == FamilyKind::WeightedL1 && !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LabError::arg("delta must lie in (0, 1)"));
        }
        if let Some(c) = &self.center {
            if c.len() != self.dim {
                return Err(LabError::arg("center has the wrong dimension"));
            }
        }
        Ok(())
    }
}

fn default_scan_radii() -> Vec<f64> {
    vec![0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0, 1.25, 1.5]
}

/// Conformal exponent `u_i` of a member.
pub fn conformal_exponent(spec: &SpikeFamilySpec, grid: &PeriodicGrid, a: f64, rho: f64) -> ScalarField {
    let c = spec.center_on(grid);
    let d = grid.dim();
    match spec.kind {
        FamilyKind::Lp => ScalarField::from_fn(grid, |x, o| {
            let q: f64 = grid.displacement(x, &c).iter().map(|v| v * v).sum::<f64>() / (rho * rho);
            o[0] = if q < 1.0 { -a * (1.0 - q).powi(3) } else { 0.0 };
        }),
        FamilyKind::WeightedL1 => {
            let delta = spec.delta;
            let smax: f64 = grid.side().iter().map(|l| (l / std::f64::consts::PI).powi(2)).sum();
            let k = (smax + rho * rho).powf(delta);
            ScalarField::from_fn(grid, |x, o| {
                let s: f64 = (0..d)
                    .map(|ax| {
                        let l = grid.side()[ax];
                        let w = (std::f64::consts::PI * (x[ax] - c[ax]) / l).sin();
                        (l / std::f64::consts::PI).powi(2) * w * w
                    })
                    .sum();
                o[0] = -a * (k - (s + rho * rho).powf(delta));
            })
        }
    }
}

/// Radial profile `u(r)` and its first two derivatives in the Euclidean
/// approximation `s = r^2`.
fn radial_u(kind: FamilyKind, a: f64, rho: f64, delta: f64, k: f64, r: f64) -> (f64, f64, f64) {
    match kind {
        FamilyKind::Lp => {
            let q = (r / rho).powi(2);
            if q >= 1.0 {
                return (0.0, 0.0, 0.0);
            }
            let w = 1.0 - q;
            let u = -a * w.powi(3);
            // d/dr w = -2r/ρ^2
            let up = a * 6.0 * r / (rho * rho) * w * w;
            let upp = a * (6.0 / (rho * rho) * w * w - 24.0 * r * r / rho.powi(4) * w);
            (u, up, upp)
        }
        FamilyKind::WeightedL1 => {
            let s = r * r + rho * rho;
            let u = -a * (k - s.powf(delta));
            let up = a * delta * s.powf(delta - 1.0) * 2.0 * r;
            let upp = a * delta * (2.0 * s.powf(delta - 1.0) + 4.0 * r * r * (delta - 1.0) * s.powf(delta - 2.0));
            (u, up, upp)
        }
    }
}

/// Closed-form scalar curvature of the radial profile.
fn radial_scalar(n: usize, kind: FamilyKind, a: f64, rho: f64, delta: f64, k: f64, r: f64) -> f64 {
    let nf = n as f64;
    let (u, up, upp) = radial_u(kind, a, rho, delta, k, r);
    let lap = if r > 0.0 {
        upp + (nf - 1.0) * up / r
    } else {
        nf * upp
    };
    (-2.0 * u).exp() * (-2.0 * (nf - 1.0) * lap - (nf - 1.0) * (nf - 2.0) * up * up)
}

fn sphere_area(n: usize) -> f64 {
    use std::f64::consts::PI;
    match n {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        _ => unreachable!("dimension checked by the grid"),
    }
}

/// `∫_0^R f(r) |S^{n-1}| r^{n-1} dr` by composite Simpson.
fn radial_integral(n: usize, radius: f64, f: impl Fn(f64) -> f64) -> f64 {
    let m = 20_000;
    let h = radius / m as f64;
    let mut s = 0.0;
    for i in 0..=m {
        let r = i as f64 * h;
        let w = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        s += w * f(r) * r.powi(n as i32 - 1);
    }
    s * h / 3.0 * sphere_area(n)
}

/// Scale-invariant constant `c` in `∫ (R)_-^{n/2} ≈ c a^{n/2}` for the
/// compact bump (linearized curvature `2(n-1) a Δb`).
pub fn lp_scaling_constant(n: usize) -> f64 {
    let nf = n as f64;
    radial_integral(n, 1.0, |r| {
        let w = 1.0 - r * r;
        let lap_b = w * ((6.0 * nf + 24.0) * r * r - 6.0 * nf);
        (2.0 * (nf - 1.0) * (-lap_b).max(0.0)).powf(nf / 2.0)
    })
}

/// Prediction of the measured functional from the radial closed form
/// (no grid involved).
pub fn predicted_functional(spec: &SpikeFamilySpec, grid: &PeriodicGrid, a: f64, rho: f64) -> f64 {
    let n = grid.dim();
    let nf = n as f64;
    let smax: f64 = grid.side().iter().map(|l| (l / std::f64::consts::PI).powi(2)).sum();
    let k = (smax + rho * rho).powf(spec.delta);
    let t = spec.target;
    match spec.kind {
        FamilyKind::Lp => radial_integral(n, spec.radius.min(rho), |r| {
            (t - radial_scalar(n, spec.kind, a, rho, spec.delta, k, r))
                .max(0.0)
                .powf(nf / 2.0)
        }),
        FamilyKind::WeightedL1 => spec
            .scan_radii
            .iter()
            .map(|&rad| {
                rad.powf(2.0 - nf - 2.0 * spec.delta)
                    * radial_integral(n, rad, |r| {
                        (t - radial_scalar(n, spec.kind, a, rho, spec.delta, k, r)).max(0.0)
                    })
            })
            .fold(0.0, f64::max),
    }
}

/// Closed-form minimum of the scalar curvature (attained at the center).
pub fn predicted_min_scalar(spec: &SpikeFamilySpec, n: usize, a: f64, rho: f64, k: f64) -> f64 {
    radial_scalar(n, spec.kind, a, rho, spec.delta, k, 0.0)
}

/// Measured data attached to a generated member.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MemberCertificate {
    pub index: usize,
    pub amplitude: f64,
    pub width: f64,
    pub c0_distance: f64,
    pub c0_closed_form: f64,
    pub bilipschitz: f64,
    pub min_scalar: f64,
    pub min_scalar_closed_form: f64,
    /// measured `∫_{B(x_0, r)} (R - κ)_-^{n/2}` (Lp) or weighted-L¹ sup (ε)
    pub functional: f64,
    pub predicted: f64,
    pub under_resolved: bool,
    /// radius of the largest flat ball around the center where `R < target`
    pub deficit_radius: f64,
}

impl MemberCertificate {
    pub fn ratio(&self) -> f64 {
        if self.predicted == 0.0 {
            if self.functional == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            self.functional / self.predicted
        }
    }
}

/// A generated member: metric plus certificate.
#[derive(Clone, Debug)]
pub struct SpikeMember {
    pub metric: MetricField,
    pub scalar: ScalarField,
    pub certificate: MemberCertificate,
}

/// Builds member `i` and measures its certificate.
pub fn spike_member(spec: &SpikeFamilySpec, grid: &PeriodicGrid, i: usize) -> Result<SpikeMember> {
    spec.validate()?;
    if grid.dim() != spec.dim {
        return Err(LabError::arg("grid and family dimensions differ"));
    }
    let a = spec.amplitude(i);
    let rho = spec.width(i);
    let h = grid.min_spacing();
    if rho < 4.0 * h {
        return Err(LabError::Resolution { rho, limit: 4.0 * h });
    }
    let u = conformal_exponent(spec, grid, a, rho);
    let metric = MetricField::conformal(&u)?;
    let scalar = scalar_curvature(&metric);
    let flat = MetricField::euclidean(grid);
    let c0 = c0_distance(&metric, &flat)?;
    let center = spec.center_on(grid);
    let x0 = grid.nearest_index(&center);
    let n = grid.dim();
    let nf = n as f64;
    let dist0 = distance_field(&flat, x0);
    let functional = match spec.kind {
        FamilyKind::Lp => negative_part_norm(
            &scalar,
            &Reference::Constant(spec.target),
            nf / 2.0,
            &flat,
            &dist0,
            spec.radius,
        )?,
        FamilyKind::WeightedL1 => {
            weighted_l1_sup(&scalar, spec.target, spec.delta, &flat, &[x0], &spec.scan_radii)?.value
        }
    };
    let umin = u.min();
    let smax: f64 = grid.side().iter().map(|l| (l / std::f64::consts::PI).powi(2)).sum();
    let k = (smax + rho * rho).powf(spec.delta);
    let mut deficit_radius: f64 = 0.0;
    let mut boundary = f64::INFINITY;
    for p in 0..grid.len() {
        if scalar.value(p) >= spec.target {
            boundary = boundary.min(dist0.at(p));
        }
    }
    if boundary.is_finite() {
        deficit_radius = deficit_radius.max(boundary);
    }
    let certificate = MemberCertificate {
        index: i,
        amplitude: a,
        width: rho,
        c0_distance: c0.distance,
        c0_closed_form: 1.0 - (2.0 * umin).exp(),
        bilipschitz: c0.bilipschitz,
        min_scalar: scalar.min(),
        min_scalar_closed_form: predicted_min_scalar(spec, n, a, rho, k),
        functional,
        predicted: predicted_functional(spec, grid, a, rho),
        under_resolved: rho < 8.0 * h,
        deficit_radius,
    };
    Ok(SpikeMember {
        metric,
        scalar,
        certificate,
    })
}

/// Gluing `φ g + (1 - φ) δ` with a radial cutoff around `center`.
#[derive(Clone, Debug)]
pub struct GlueSpec {
    pub inner: SymTensorField,
    pub center: Vec<f64>,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

pub fn glued_metric(spec: &GlueSpec) -> Result<MetricField> {
    let grid = spec.inner.grid();
    if !(spec.inner_radius > 0.0 && spec.inner_radius < spec.outer_radius && spec.outer_radius < grid.injectivity_radius()) {
        return Err(LabError::arg(format!(
            "glue radii need 0 < {} < {} < {}",
            spec.inner_radius,
            spec.outer_radius,
            grid.injectivity_radius()
        )));
    }
    // validates positive definiteness of the inner metric
    let inner = MetricField::new(spec.inner.clone())?;
    let profile = CutoffProfile {
        inner: spec.inner_radius,
        outer: spec.outer_radius,
    };
    let d = grid.dim();
    let mut out = SymTensorField::zeros(grid);
    for p in 0..grid.len() {
        let x = grid.position(p);
        let r = grid.displacement(&x, &spec.center).iter().map(|v| v * v).sum::<f64>().sqrt();
        let phi = profile.value(r);
        let src = inner.base().at(p);
        let o = out.at_mut(p);
        for i in 0..d {
            for j in i..d {
                let k = crate::field::sym_index(i, j, d);
                let e = if i == j { 1.0 } else { 0.0 };
                o[k] = if phi == 1.0 {
                    src[k]
                } else if phi == 0.0 {
                    e
                } else {
                    phi * src[k] + (1.0 - phi) * e
                };
            }
        }
    }
    MetricField::new(out)
}

/// Sup-norm distance of `g1` from `g2` measured against `g2`, and the
/// bilipschitz factor of `g1` relative to `g2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C0Distance {
    pub distance: f64,
    pub bilipschitz: f64,
}

pub fn c0_distance(g1: &MetricField, g2: &MetricField) -> Result<C0Distance> {
    if g1.grid() != g2.grid() {
        return Err(LabError::arg("metrics live on different grids"));
    }
    let d = g1.dim();
    let mut dist: f64 = 0.0;
    let mut bl: f64 = 1.0;
    for p in 0..g1.grid().len() {
        let a = g1.matrix(p);
        let b = g2.matrix(p);
        if a == b {
            continue;
        }
        let ev = linalg::generalized_eigenvalues(&a, &b, d)
            .ok_or_else(|| LabError::Numerical("reference metric not positive definite".into()))?;
        let (lo, hi) = (ev[0], ev[d - 1]);
        dist = dist.max((hi - 1.0).abs()).max((lo - 1.0).abs());
        bl = bl.max(hi).max(1.0 / lo);
    }
    Ok(C0Distance {
        distance: dist,
        bilipschitz: bl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PeriodicGrid {
        PeriodicGrid::cubic(3, 32, 4.0).unwrap()
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let mut spec = SpikeFamilySpec::lp(3, 1);
        spec.a0 = 0.0;
        let m = spike_member(&spec, &grid(), 1).unwrap();
        assert_eq!(m.certificate.c0_distance, 0.0);
        assert_eq!(m.certificate.min_scalar, 0.0);
        assert_eq!(m.certificate.functional, 0.0);
        assert_eq!(m.certificate.bilipschitz, 1.0);
    }

    #[test]
    fn resolution_limits() {
        let mut spec = SpikeFamilySpec::lp(3, 1);
        spec.rho0 = 0.4;
        assert!(matches!(spike_member(&spec, &grid(), 1), Err(LabError::Resolution { .. })));
        spec.rho0 = 0.75;
        assert!(spike_member(&spec, &grid(), 1).unwrap().certificate.under_resolved);
    }

    #[test]
    fn lp_member_certificate_matches_closed_forms() {
        let spec = SpikeFamilySpec::lp(3, 2);
        let m = spike_member(&spec, &grid(), 2).unwrap();
        let c = &m.certificate;
        assert!((c.c0_distance - c.c0_closed_form).abs() < 1e-10);
        assert!((c.c0_distance - (1.0 - (-2.0 * 0.5f64).exp())).abs() < 1e-10);
        let a: f64 = 0.5;
        let rho = 2f64.powf(-0.25);
        let exact_min = -72.0 * a * (2.0 * a).exp() / (rho * rho);
        assert!((c.min_scalar_closed_form - exact_min).abs() < 1e-9 * exact_min.abs());
        assert!((c.min_scalar - exact_min).abs() < 0.05 * exact_min.abs(), "{c:?}");
        assert!(c.ratio() > 0.5 && c.ratio() < 2.0, "{c:?}");
    }

    #[test]
    fn lp_scaling_constant_matches_small_amplitude_limit() {
        let c = lp_scaling_constant(3);
        let mut spec = SpikeFamilySpec::lp(3, 1);
        spec.a0 = 1e-4;
        let g = grid();
        let p = predicted_functional(&spec, &g, 1e-4, 1.0);
        assert!((p / (c * 1e-4f64.powf(1.5)) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn c0_distance_of_scaling() {
        let g = PeriodicGrid::cubic(2, 8, 1.0).unwrap();
        let a = MetricField::euclidean(&g);
        let b = MetricField::new(SymTensorField::scaled_identity(&g, 0.25)).unwrap();
        let d = c0_distance(&b, &a).unwrap();
        assert!((d.bilipschitz - 4.0).abs() < 1e-12);
        assert!((d.distance - 0.75).abs() < 1e-12);
        let z = c0_distance(&a, &a).unwrap();
        assert_eq!((z.distance, z.bilipschitz), (0.0, 1.0));
    }

    #[test]
    fn glue_flat_and_outside() {
        let g = grid();
        let flat = SymTensorField::scaled_identity(&g, 1.0);
        let spec = GlueSpec {
            inner: flat.clone(),
            center: vec![2.0; 3],
            inner_radius: 0.5,
            outer_radius: 1.0,
        };
        assert_eq!(glued_metric(&spec).unwrap().base().max_abs_diff(&flat).unwrap(), 0.0);
        let bad = GlueSpec {
            outer_radius: 3.0,
            ..spec
        };
        assert!(glued_metric(&bad).is_err());
    }

    #[test]
    fn glue_twice_squares_the_cutoff() {
        let g = grid();
        let inner = SymTensorField::scaled_identity(&g, 2.0);
        let spec = GlueSpec {
            inner,
            center: vec![2.0; 3],
            inner_radius: 0.5,
            outer_radius: 1.25,
        };
        let once = glued_metric(&spec).unwrap();
        let twice = glued_metric(&GlueSpec {
            inner: once.base().clone(),
            ..spec.clone()
        })
        .unwrap();
        let profile = CutoffProfile { inner: 0.5, outer: 1.25 };
        for p in 0..g.len() {
            let x = g.position(p);
            let r = g.displacement(&x, &spec.center).iter().map(|v| v * v).sum::<f64>().sqrt();
            let phi = profile.value(r);
            let expect = 1.0 + phi * phi;
            assert!((twice.base().get(p, 0, 0) - expect).abs() < 1e-14);
            if phi == 0.0 || phi == 1.0 {
                assert_eq!(twice.base().at(p), once.base().at(p));
            }
        }
    }

    #[test]
    fn weighted_family_is_nonpositive_and_resolved() {
        let spec = SpikeFamilySpec::weighted_l1(3, 5, 0.25);
        let g = grid();
        for i in spec.members() {
            let rho = spec.width(i);
            assert!(rho >= 4.0 * g.min_spacing());
            let u = conformal_exponent(&spec, &g, spec.amplitude(i), rho);
            assert!(u.max() <= 1e-15);
        }
    }
}
