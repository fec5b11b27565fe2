//! Central finite differences with periodic wraparound, and the pointwise
//! metric jets (first and second derivatives) used by the curvature kernels.

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::field::{Field, FieldKind};
use crate::grid::{PeriodicGrid, StencilOrder, MAX_DIM};

/// Maximum packed component count handled by [`JetSampler`].
pub const MAX_SYM: usize = MAX_DIM * (MAX_DIM + 1) / 2;

/// Derivative of every component of `f` along `axis`, of order 1 or 2.
pub fn central_derivative<K: FieldKind>(f: &Field<K>, axis: usize, order: u32) -> Result<Field<K>> {
    let grid = f.grid();
    if axis >= grid.dim() {
        return Err(LabError::arg(format!(
            "axis {axis} out of range for dimension {}",
            grid.dim()
        )));
    }
    let h = grid.spacing(axis);
    let (coef, even) = match order {
        1 => (grid.stencil().first().map(|c| c / h), false),
        2 => (grid.stencil().second().map(|c| c / (h * h)), true),
        _ => return Err(LabError::arg(format!("derivative order {order} not in {{1, 2}}"))),
    };
    let tables = grid.shift_tables();
    let tab = &tables[axis];
    let nc = f.components();
    let n_axis = grid.shape()[axis];
    let stride = grid.strides()[axis];
    let src = f.data();
    let mut out = Field::<K>::zeros(grid);
    out.data_mut()
        .par_chunks_mut(nc)
        .enumerate()
        .for_each(|(p, o)| {
            let c = (p / stride) % n_axis;
            let f0 = &src[p * nc..(p + 1) * nc];
            // symmetric differences so that constants give exactly zero
            for k in 1..=2 {
                let w = coef[2 + k];
                if w == 0.0 {
                    continue;
                }
                let qp = (p as isize + tab[2 + k][c]) as usize;
                let qm = (p as isize + tab[2 - k][c]) as usize;
                let fp = &src[qp * nc..(qp + 1) * nc];
                let fm = &src[qm * nc..(qm + 1) * nc];
                for i in 0..nc {
                    o[i] += if even {
                        w * ((fp[i] - f0[i]) + (fm[i] - f0[i]))
                    } else {
                        w * (fp[i] - fm[i])
                    };
                }
            }
        });
    Ok(out)
}

/// Mixed second derivative along two distinct axes (product of first-derivative stencils).
pub fn mixed_derivative<K: FieldKind>(f: &Field<K>, a: usize, b: usize) -> Result<Field<K>> {
    if a == b {
        return central_derivative(f, a, 2);
    }
    let fa = central_derivative(f, a, 1)?;
    central_derivative(&fa, b, 1)
}

/// Samples first and second derivatives of packed multi-component data at a
/// grid point. Mixed derivatives use the 16-point product stencil, which
/// agrees exactly with composing two first-derivative passes.
pub(crate) struct JetSampler {
    dim: usize,
    nc: usize,
    shape: Vec<usize>,
    strides: Vec<usize>,
    tables: Vec<[Vec<isize>; 5]>,
    d1: Vec<[f64; 5]>,
    d2: Vec<[f64; 5]>,
}

/// First and second derivatives of up to [`MAX_SYM`] components at one point:
/// `d1[m][c] = ∂_m f_c`, `d2[m][l][c] = ∂_m ∂_l f_c`.
pub(crate) struct Jet {
    pub value: [f64; MAX_SYM],
    pub d1: [[f64; MAX_SYM]; MAX_DIM],
    pub d2: [[[f64; MAX_SYM]; MAX_DIM]; MAX_DIM],
}

impl JetSampler {
    pub fn new(grid: &PeriodicGrid, nc: usize) -> Self {
        assert!(nc <= MAX_SYM);
        let st: StencilOrder = grid.stencil();
        let dim = grid.dim();
        Self {
            dim,
            nc,
            shape: grid.shape().to_vec(),
            strides: grid.strides(),
            tables: grid.shift_tables(),
            d1: (0..dim)
                .map(|a| st.first().map(|c| c / grid.spacing(a)))
                .collect(),
            d2: (0..dim)
                .map(|a| {
                    let h = grid.spacing(a);
                    st.second().map(|c| c / (h * h))
                })
                .collect(),
        }
    }

    #[inline]
    fn coords(&self, p: usize) -> [usize; MAX_DIM] {
        let mut c = [0; MAX_DIM];
        for a in 0..self.dim {
            c[a] = (p / self.strides[a]) % self.shape[a];
        }
        c
    }

    pub fn jet(&self, data: &[f64], p: usize) -> Jet {
        match (self.dim, self.nc) {
            (2, 3) => self.jet_n::<2, 3>(data, p),
            (3, 6) => self.jet_n::<3, 6>(data, p),
            (4, 10) => self.jet_n::<4, 10>(data, p),
            _ => self.jet_dyn(data, p, self.dim, self.nc),
        }
    }

    #[inline(always)]
    fn jet_n<const D: usize, const NC: usize>(&self, data: &[f64], p: usize) -> Jet {
        self.jet_dyn(data, p, D, NC)
    }

    #[inline(always)]
    fn jet_dyn(&self, data: &[f64], p: usize, d: usize, nc: usize) -> Jet {
        let c = self.coords(p);
        let mut jet = Jet {
            value: [0.0; MAX_SYM],
            d1: [[0.0; MAX_SYM]; MAX_DIM],
            d2: [[[0.0; MAX_SYM]; MAX_DIM]; MAX_DIM],
        };
        jet.value[..nc].copy_from_slice(&data[p * nc..(p + 1) * nc]);
        let pi = p as isize;
        let f0 = &data[p * nc..(p + 1) * nc];
        for a in 0..d {
            let tab = &self.tables[a];
            for k in 1..=2 {
                let w1 = self.d1[a][2 + k];
                let w2 = self.d2[a][2 + k];
                if w1 == 0.0 && w2 == 0.0 {
                    continue;
                }
                let qp = (pi + tab[2 + k][c[a]]) as usize;
                let qm = (pi + tab[2 - k][c[a]]) as usize;
                let fp = &data[qp * nc..(qp + 1) * nc];
                let fm = &data[qm * nc..(qm + 1) * nc];
                for i in 0..nc {
                    jet.d1[a][i] += w1 * (fp[i] - fm[i]);
                    jet.d2[a][a][i] += w2 * ((fp[i] - f0[i]) + (fm[i] - f0[i]));
                }
            }
            for b in a + 1..d {
                let tb = &self.tables[b];
                let mut acc = [0.0; MAX_SYM];
                for ka in 1..=2 {
                    let wa = self.d1[a][2 + ka];
                    if wa == 0.0 {
                        continue;
                    }
                    let ap = pi + tab[2 + ka][c[a]];
                    let am = pi + tab[2 - ka][c[a]];
                    for kb in 1..=2 {
                        let wb = self.d1[b][2 + kb];
                        if wb == 0.0 {
                            continue;
                        }
                        let bp = tb[2 + kb][c[b]];
                        let bm = tb[2 - kb][c[b]];
                        let w = wa * wb;
                        let pp = &data[(ap + bp) as usize * nc..][..nc];
                        let pm = &data[(ap + bm) as usize * nc..][..nc];
                        let mp = &data[(am + bp) as usize * nc..][..nc];
                        let mm = &data[(am + bm) as usize * nc..][..nc];
                        for i in 0..nc {
                            acc[i] += w * ((pp[i] - pm[i]) - (mp[i] - mm[i]));
                        }
                    }
                }
                jet.d2[a][b] = acc;
                jet.d2[b][a] = acc;
            }
        }
        jet
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ScalarField, SymTensorField};
    use std::f64::consts::PI;

    fn sin_error(n: usize) -> f64 {
        let g = PeriodicGrid::cubic(2, n, 3.0).unwrap();
        let k = 2.0 * PI / 3.0;
        let f = ScalarField::from_fn(&g, |x, o| o[0] = (k * x[0]).sin());
        let df = central_derivative(&f, 0, 1).unwrap();
        let exact = ScalarField::from_fn(&g, |x, o| o[0] = k * (k * x[0]).cos());
        df.max_abs_diff(&exact).unwrap()
    }

    #[test]
    fn constant_has_zero_derivative() {
        let g = PeriodicGrid::cubic(3, 8, 1.0).unwrap();
        let f = ScalarField::constant(&g, 2.5);
        for a in 0..3 {
            for o in 1..=2 {
                assert!(central_derivative(&f, a, o).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_derivative_is_fourth_order() {
        let e16 = sin_error(16);
        let e32 = sin_error(32);
        assert!(e16 < 5e-3);
        let ratio = e16 / e32;
        assert!((ratio - 16.0).abs() < 0.3 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn axis_out_of_range_is_rejected() {
        let g = PeriodicGrid::cubic(2, 8, 1.0).unwrap();
        let f = ScalarField::constant(&g, 1.0);
        assert!(matches!(central_derivative(&f, 2, 1), Err(LabError::Argument(_))));
        assert!(central_derivative(&f, 0, 3).is_err());
    }

    #[test]
    fn quartic_polynomial_in_one_period_is_exact_away_from_seam() {
        // degree <= 4 is reproduced exactly by the 5-point stencils
        let g = PeriodicGrid::new(vec![64, 8], vec![64.0, 8.0]).unwrap();
        let f = ScalarField::from_fn(&g, |x, o| {
            let s = x[0];
            o[0] = s.powi(4) - 3.0 * s * s;
        });
        let d2 = central_derivative(&f, 0, 2).unwrap();
        for p in 0..g.len() {
            let c = g.coords(p);
            if (4..60).contains(&c[0]) {
                let s = c[0] as f64;
                assert!((d2.value(p) - (12.0 * s * s - 6.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jet_matches_field_derivatives() {
        let g = PeriodicGrid::new(vec![12, 10, 8], vec![1.0, 1.3, 0.9]).unwrap();
        let f = SymTensorField::from_fn(&g, |x, o| {
            for (i, v) in o.iter_mut().enumerate() {
                *v = (2.0 * PI * x[0]).sin() * (i as f64 + 1.0)
                    + (2.0 * PI * x[1] / 1.3).cos() * (2.0 * PI * x[2] / 0.9).sin();
            }
        });
        let s = JetSampler::new(&g, 6);
        let dx = central_derivative(&f, 0, 1).unwrap();
        let dyz = mixed_derivative(&f, 1, 2).unwrap();
        let dzz = central_derivative(&f, 2, 2).unwrap();
        for p in [0, 7, 133, g.len() - 1] {
            let j = s.jet(f.data(), p);
            for c in 0..6 {
                assert!((j.d1[0][c] - dx.at(p)[c]).abs() < 1e-10);
                assert!((j.d2[1][2][c] - dyz.at(p)[c]).abs() < 1e-9);
                assert!((j.d2[2][1][c] - dyz.at(p)[c]).abs() < 1e-9);
                assert!((j.d2[2][2][c] - dzz.at(p)[c]).abs() < 1e-9);
            }
        }
    }
}
