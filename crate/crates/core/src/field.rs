//! Grid-sampled fields. Storage is point-major: the components of one grid
//! point are contiguous, points follow the grid's row-major order.

use std::marker::PhantomData;

use crate::error::{LabError, Result};
use crate::grid::PeriodicGrid;

/// Component layout of a field kind.
pub trait FieldKind: Send + Sync + 'static {
    const NAME: &'static str;
    /// Tag stored in the binary header.
    const TAG: u32;
    fn components(dim: usize) -> usize;
}

#[derive(Debug, Clone, Copy)]
pub struct Scalar;
#[derive(Debug, Clone, Copy)]
pub struct Vector;
/// Symmetric 2-tensor, upper triangle packed.
#[derive(Debug, Clone, Copy)]
pub struct SymTensor;
/// `Gamma^k_{ij}`, packed as `k * S + sym(i, j)`.
#[derive(Debug, Clone, Copy)]
pub struct Christoffel;
/// Fully covariant curvature `R_{ijkl}` packed over antisymmetric pairs
/// `(i<j) x (k<l)`.
#[derive(Debug, Clone, Copy)]
pub struct Riemann;

impl FieldKind for Scalar {
    const NAME: &'static str = "scalar";
    const TAG: u32 = 1;
    fn components(_: usize) -> usize {
        1
    }
}
impl FieldKind for Vector {
    const NAME: &'static str = "vector";
    const TAG: u32 = 2;
    fn components(dim: usize) -> usize {
        dim
    }
}
impl FieldKind for SymTensor {
    const NAME: &'static str = "sym-tensor";
    const TAG: u32 = 3;
    fn components(dim: usize) -> usize {
        sym_len(dim)
    }
}
impl FieldKind for Christoffel {
    const NAME: &'static str = "christoffel";
    const TAG: u32 = 4;
    fn components(dim: usize) -> usize {
        dim * sym_len(dim)
    }
}
impl FieldKind for Riemann {
    const NAME: &'static str = "riemann";
    const TAG: u32 = 5;
    fn components(dim: usize) -> usize {
        let p = pair_len(dim);
        p * p
    }
}

pub const fn sym_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

pub const fn pair_len(dim: usize) -> usize {
    dim * (dim - 1) / 2
}

/// Packed index of `(i, j)` in the upper triangle.
#[inline]
pub fn sym_index(i: usize, j: usize, dim: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * (i + 1) / 2 + j
}

/// Packed index of the antisymmetric pair `(i, j)`, `i < j`.
#[inline]
pub fn pair_index(i: usize, j: usize, dim: usize) -> usize {
    debug_assert!(i < j);
    // pairs ordered (0,1),(0,2),..,(0,n-1),(1,2),..
    i * (2 * dim - i - 1) / 2 + (j - i - 1)
}

/// A field of kind `K` on a periodic grid.
#[derive(Debug)]
pub struct Field<K: FieldKind> {
    grid: PeriodicGrid,
    data: Vec<f64>,
    _kind: PhantomData<K>,
}

impl<K: FieldKind> Clone for Field<K> {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            data: self.data.clone(),
            _kind: PhantomData,
        }
    }
}

pub type ScalarField = Field<Scalar>;
pub type VectorField = Field<Vector>;
pub type SymTensorField = Field<SymTensor>;
pub type ChristoffelField = Field<Christoffel>;
pub type RiemannField = Field<Riemann>;

impl<K: FieldKind> Field<K> {
    pub fn zeros(grid: &PeriodicGrid) -> Self {
        let n = grid.len() * K::components(grid.dim());
        Self {
            grid: grid.clone(),
            data: vec![0.0; n],
            _kind: PhantomData,
        }
    }

    pub fn from_data(grid: &PeriodicGrid, data: Vec<f64>) -> Result<Self> {
        let want = grid.len() * K::components(grid.dim());
        if data.len() != want {
            return Err(LabError::arg(format!(
                "{} field needs {want} values, got {}",
                K::NAME,
                data.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            data,
            _kind: PhantomData,
        })
    }

    /// Build a field by evaluating `f(position, out)` at every grid point.
    pub fn from_fn(grid: &PeriodicGrid, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut field = Self::zeros(grid);
        let nc = field.components();
        for p in 0..grid.len() {
            let x = grid.position(p);
            f(&x, &mut field.data[p * nc..(p + 1) * nc]);
        }
        field
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        K::components(self.grid.dim())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, p: usize) -> &[f64] {
        let nc = self.components();
        &self.data[p * nc..(p + 1) * nc]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize) -> &mut [f64] {
        let nc = self.components();
        &mut self.data[p * nc..(p + 1) * nc]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup-norm of the difference of two fields on the same grid.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other.grid())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn check_same_grid(&self, other: &PeriodicGrid) -> Result<()> {
        if &self.grid != other {
            return Err(LabError::arg("fields live on different grids"));
        }
        Ok(())
    }

    /// Multilinear interpolation of every component at a physical position.
    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) {
        let nc = self.components();
        out[..nc].iter_mut().for_each(|v| *v = 0.0);
        for (p, w) in self.grid.interpolation_stencil(x) {
            for (o, v) in out.iter_mut().zip(self.at(p)) {
                *o += w * v;
            }
        }
    }
}

impl ScalarField {
    pub fn constant(grid: &PeriodicGrid, c: f64) -> Self {
        Self::from_data(grid, vec![c; grid.len()]).expect("length matches")
    }

    #[inline]
    pub fn value(&self, p: usize) -> f64 {
        self.data[p]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v < self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_data(&self.grid, self.data.iter().map(|&v| f(v)).collect()).expect("same length")
    }
}

impl SymTensorField {
    #[inline]
    pub fn get(&self, p: usize, i: usize, j: usize) -> f64 {
        self.at(p)[sym_index(i, j, self.grid.dim())]
    }

    /// Constant multiple of the identity.
    pub fn scaled_identity(grid: &PeriodicGrid, c: f64) -> Self {
        let d = grid.dim();
        Self::from_fn(grid, |_, out| {
            for i in 0..d {
                out[sym_index(i, i, d)] = c;
            }
        })
    }
}

impl ChristoffelField {
    #[inline]
    pub fn get(&self, p: usize, k: usize, i: usize, j: usize) -> f64 {
        let d = self.grid.dim();
        self.at(p)[k * sym_len(d) + sym_index(i, j, d)]
    }
}

impl RiemannField {
    /// `R_{ijkl}` with the pair antisymmetries applied.
    pub fn get(&self, p: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        if i == j || k == l {
            return 0.0;
        }
        let d = self.grid.dim();
        let (s1, a, b) = if i < j { (1.0, i, j) } else { (-1.0, j, i) };
        let (s2, c, e) = if k < l { (1.0, k, l) } else { (-1.0, l, k) };
        let np = pair_len(d);
        s1 * s2 * self.at(p)[pair_index(a, b, d) * np + pair_index(c, e, d)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_index_packs_upper_triangle() {
        for d in 2..=4 {
            let mut seen = vec![false; sym_len(d)];
            for i in 0..d {
                for j in i..d {
                    let k = sym_index(i, j, d);
                    assert_eq!(k, sym_index(j, i, d));
                    assert!(!seen[k]);
                    seen[k] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
        assert_eq!(sym_index(0, 0, 3), 0);
        assert_eq!(sym_index(0, 2, 3), 2);
        assert_eq!(sym_index(1, 1, 3), 3);
        assert_eq!(sym_index(2, 2, 3), 5);
    }

    #[test]
    fn pair_index_is_dense() {
        for d in 2..=4 {
            let mut v = vec![];
            for i in 0..d {
                for j in i + 1..d {
                    v.push(pair_index(i, j, d));
                }
            }
            assert_eq!(v, (0..pair_len(d)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn from_data_checks_length() {
        let g = PeriodicGrid::cubic(2, 8, 1.0).unwrap();
        assert!(SymTensorField::from_data(&g, vec![0.0; 10]).is_err());
        assert!(SymTensorField::from_data(&g, vec![0.0; 64 * 3]).is_ok());
    }
}
