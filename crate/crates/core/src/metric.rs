//! Positive-definite metrics sampled on a periodic grid.

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::field::{sym_len, ScalarField, SymTensorField};
use crate::grid::PeriodicGrid;
use crate::linalg::{self, Mat};

/// Eigenvalues at or below this are rejected as degenerate.
pub const PD_TOLERANCE: f64 = 1e-8;

/// A metric with cached inverse, volume density and eigenvalue certificate.
#[derive(Clone, Debug)]
pub struct MetricField {
    base: SymTensorField,
    inverse: SymTensorField,
    sqrt_det: ScalarField,
    min_eigenvalue: f64,
    max_eigenvalue: f64,
    max_inverse_eigenvalue: f64,
}

struct PointInfo {
    inv: Vec<f64>,
    sqrt_det: f64,
    lmin: f64,
    lmax: f64,
}

impl MetricField {
    pub fn new(base: SymTensorField) -> Result<Self> {
        let grid = base.grid().clone();
        let d = grid.dim();
        let s = sym_len(d);
        let info: Vec<PointInfo> = (0..grid.len())
            .into_par_iter()
            .map(|p| {
                let m = linalg::unpack(base.at(p), d);
                let ev = linalg::sym_eigenvalues(&m, d);
                let (lmin, lmax) = (ev[0], ev[d - 1]);
                let mut inv = vec![0.0; s];
                let mut sqrt_det = f64::NAN;
                if lmin > PD_TOLERANCE && lmin.is_finite() && lmax.is_finite() {
                    if let Some((im, det)) = linalg::inverse(&m, d) {
                        linalg::pack(&im, d, &mut inv);
                        sqrt_det = det.sqrt();
                    }
                }
                PointInfo {
                    inv,
                    sqrt_det,
                    lmin,
                    lmax,
                }
            })
            .collect();
        let mut worst = 0;
        for (p, pi) in info.iter().enumerate() {
            if !(pi.lmin >= info[worst].lmin) {
                worst = p;
            }
        }
        let w = &info[worst];
        if !(w.lmin > PD_TOLERANCE) || !w.sqrt_det.is_finite() || info.iter().any(|i| !i.lmax.is_finite()) {
            return Err(LabError::Geometry {
                point: grid.coords(worst),
                min_eigenvalue: w.lmin,
            });
        }
        let mut inv = Vec::with_capacity(grid.len() * s);
        let mut sd = Vec::with_capacity(grid.len());
        let mut lmin = f64::INFINITY;
        let mut lmax: f64 = 0.0;
        let mut imax: f64 = 0.0;
        for pi in &info {
            inv.extend_from_slice(&pi.inv);
            sd.push(pi.sqrt_det);
            lmin = lmin.min(pi.lmin);
            lmax = lmax.max(pi.lmax);
            imax = imax.max(1.0 / pi.lmin);
        }
        let out = Self {
            inverse: SymTensorField::from_data(&grid, inv)?,
            sqrt_det: ScalarField::from_data(&grid, sd)?,
            base,
            min_eigenvalue: lmin,
            max_eigenvalue: lmax,
            max_inverse_eigenvalue: imax,
        };
        let res = out.inverse_residual();
        if !(res <= 1e-10) {
            return Err(LabError::Numerical(format!(
                "metric inverse residual {res:e} exceeds 1e-10"
            )));
        }
        Ok(out)
    }

    pub fn euclidean(grid: &PeriodicGrid) -> Self {
        Self::new(SymTensorField::scaled_identity(grid, 1.0)).expect("identity is positive definite")
    }

    /// `g(x)` given pointwise as a packed upper triangle.
    pub fn from_fn(grid: &PeriodicGrid, f: impl FnMut(&[f64], &mut [f64])) -> Result<Self> {
        Self::new(SymTensorField::from_fn(grid, f))
    }

    /// Conformally flat metric `e^{2u} δ`.
    pub fn conformal(u: &ScalarField) -> Result<Self> {
        let grid = u.grid();
        let d = grid.dim();
        let mut base = SymTensorField::zeros(grid);
        for p in 0..grid.len() {
            let f = (2.0 * u.value(p)).exp();
            let out = base.at_mut(p);
            for i in 0..d {
                out[crate::field::sym_index(i, i, d)] = f;
            }
        }
        Self::new(base)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.base.grid()
    }

    pub fn dim(&self) -> usize {
        self.grid().dim()
    }

    pub fn base(&self) -> &SymTensorField {
        &self.base
    }

    pub fn into_base(self) -> SymTensorField {
        self.base
    }

    pub fn inverse(&self) -> &SymTensorField {
        &self.inverse
    }

    pub fn sqrt_det(&self) -> &ScalarField {
        &self.sqrt_det
    }

    #[inline]
    pub fn matrix(&self, p: usize) -> Mat {
        linalg::unpack(self.base.at(p), self.dim())
    }

    #[inline]
    pub fn inverse_matrix(&self, p: usize) -> Mat {
        linalg::unpack(self.inverse.at(p), self.dim())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eigenvalue
    }

    /// Largest eigenvalue of `g^{-1}` over the grid (enters the CFL bound).
    pub fn max_inverse_eigenvalue(&self) -> f64 {
        self.max_inverse_eigenvalue
    }

    /// Smallest `Λ` with `Λ^{-1} δ <= g <= Λ δ` at every point.
    pub fn bilipschitz(&self) -> f64 {
        self.max_eigenvalue.max(self.max_inverse_eigenvalue).max(1.0)
    }

    /// Riemannian volume of the torus.
    pub fn volume(&self) -> f64 {
        let cv = self.grid().cell_volume();
        self.sqrt_det.data().iter().sum::<f64>() * cv
    }

    /// Max over points and entries of `|g g^{-1} - I|`.
    pub fn inverse_residual(&self) -> f64 {
        let d = self.dim();
        (0..self.grid().len())
            .into_par_iter()
            .map(|p| {
                let g = self.matrix(p);
                let gi = self.inverse_matrix(p);
                let mut r: f64 = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        let s: f64 = (0..d).map(|k| g[i][k] * gi[k][j]).sum();
                        r = r.max((s - if i == j { 1.0 } else { 0.0 }).abs());
                    }
                }
                r
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// Metric at an off-grid position by multilinear interpolation.
    pub fn interpolate(&self, x: &[f64]) -> Mat {
        let d = self.dim();
        let mut packed = [0.0; crate::stencil::MAX_SYM];
        self.base.interpolate(x, &mut packed);
        linalg::unpack(&packed, d)
    }
}

/// Metric length of a displacement `v` under `g`.
#[inline]
pub fn metric_length(g: &Mat, v: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += g[i][j] * v[i] * v[j];
        }
    }
    s.max(0.0).sqrt()
}
