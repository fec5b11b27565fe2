//! Uniform periodic grids on flat tori.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Largest supported dimension. Pointwise kernels use fixed-size arrays.
pub const MAX_DIM: usize = 4;

/// Finite-difference accuracy of the central stencils.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StencilOrder {
    Second,
    #[default]
    Fourth,
}

impl StencilOrder {
    /// Coefficients of the first-derivative stencil at offsets -2..=2 (times 1/h).
    pub fn first(self) -> [f64; 5] {
        match self {
            StencilOrder::Second => [0.0, -0.5, 0.0, 0.5, 0.0],
            StencilOrder::Fourth => [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0],
        }
    }

    /// Coefficients of the second-derivative stencil at offsets -2..=2 (times 1/h^2).
    pub fn second(self) -> [f64; 5] {
        match self {
            StencilOrder::Second => [0.0, 1.0, -2.0, 1.0, 0.0],
            StencilOrder::Fourth => [
                -1.0 / 12.0,
                16.0 / 12.0,
                -30.0 / 12.0,
                16.0 / 12.0,
                -1.0 / 12.0,
            ],
        }
    }

    pub fn accuracy(self) -> u32 {
        match self {
            StencilOrder::Second => 2,
            StencilOrder::Fourth => 4,
        }
    }
}

/// A flat torus `prod [0, L_a)` sampled by `N_a` points per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    shape: Vec<usize>,
    side: Vec<f64>,
    #[serde(default)]
    stencil: StencilOrder,
}

impl PeriodicGrid {
    pub fn new(shape: Vec<usize>, side: Vec<f64>) -> Result<Self> {
        if shape.len() != side.len() {
            return Err(LabError::arg(format!(
                "shape has {} axes but side has {}",
                shape.len(),
                side.len()
            )));
        }
        let dim = shape.len();
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(LabError::arg(format!("dimension {dim} outside 2..={MAX_DIM}")));
        }
        if let Some(n) = shape.iter().find(|&&n| n < 8) {
            return Err(LabError::arg(format!("{n} points per axis; need at least 8")));
        }
        if side.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(LabError::arg("side lengths must be positive and finite"));
        }
        Ok(Self {
            shape,
            side,
            stencil: StencilOrder::Fourth,
        })
    }

    /// `dim` axes with `n` points each on a cube of side `side`.
    pub fn cubic(dim: usize, n: usize, side: f64) -> Result<Self> {
        Self::new(vec![n; dim], vec![side; dim])
    }

    pub fn with_stencil(mut self, stencil: StencilOrder) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn side(&self) -> &[f64] {
        &self.side
    }

    pub fn stencil(&self) -> StencilOrder {
        self.stencil
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.side[axis] / self.shape[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).fold(f64::INFINITY, f64::min)
    }

    /// Volume of one grid cell.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest radius for which metric balls stay clear of the cut locus.
    pub fn injectivity_radius(&self) -> f64 {
        self.side.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0
    }

    /// Row-major strides (last axis fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for a in (0..self.dim().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&c, &n)| acc * n + (c % n))
    }

    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut c = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            c[a] = index % self.shape[a];
            index /= self.shape[a];
        }
        c
    }

    /// Physical position of a grid point.
    pub fn position(&self, index: usize) -> Vec<f64> {
        self.coords(index)
            .iter()
            .enumerate()
            .map(|(a, &c)| c as f64 * self.spacing(a))
            .collect()
    }

    /// Index of the grid point nearest to a physical position (wrapped).
    pub fn nearest_index(&self, x: &[f64]) -> usize {
        let coords: Vec<usize> = (0..self.dim())
            .map(|a| {
                let n = self.shape[a] as i64;
                let c = (x[a] / self.spacing(a)).round() as i64;
                c.rem_euclid(n) as usize
            })
            .collect();
        self.index(&coords)
    }

    /// Index of `coords + offset` with periodic wraparound.
    pub fn offset_index(&self, coords: &[usize], offset: &[isize]) -> usize {
        let mut idx = 0usize;
        for a in 0..self.dim() {
            let n = self.shape[a] as isize;
            let c = (coords[a] as isize + offset[a]).rem_euclid(n) as usize;
            idx = idx * self.shape[a] + c;
        }
        idx
    }

    /// Wrap a coordinate difference to the minimal image on axis `a`.
    pub fn wrap_delta(&self, axis: usize, d: f64) -> f64 {
        let l = self.side[axis];
        d - l * (d / l).round()
    }

    /// Minimal-image displacement `x - y` on the torus.
    pub fn displacement(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|a| self.wrap_delta(a, x[a] - y[a])).collect()
    }

    pub fn wrap_position(&self, x: &mut [f64]) {
        for (a, xa) in x.iter_mut().enumerate() {
            *xa = xa.rem_euclid(self.side[a]);
        }
    }

    /// Neighbour tables: `table[a][k][c]` is the signed index jump for offset
    /// `k - 2` along axis `a` starting from coordinate `c`.
    pub(crate) fn shift_tables(&self) -> Vec<[Vec<isize>; 5]> {
        let strides = self.strides();
        (0..self.dim())
            .map(|a| {
                let n = self.shape[a] as isize;
                let mk = |o: isize| -> Vec<isize> {
                    (0..n)
                        .map(|c| ((c + o).rem_euclid(n) - c) * strides[a] as isize)
                        .collect()
                };
                [mk(-2), mk(-1), mk(0), mk(1), mk(2)]
            })
            .collect()
    }

    /// Multilinear interpolation weights of a physical position:
    /// returns up to `2^dim` (index, weight) pairs.
    pub fn interpolation_stencil(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let n = self.shape[a];
            let s = x[a].rem_euclid(self.side[a]) / self.spacing(a);
            let f = s.floor();
            base[a] = (f as usize) % n;
            frac[a] = s - f;
        }
        let mut out = Vec::with_capacity(1 << d);
        let mut coords = vec![0usize; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                coords[a] = (base[a] + bit) % self.shape[a];
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                out.push((self.index(&coords), w));
            }
        }
        out
    }
}
