//! Christoffel symbols and curvature from metric jets.
//!
//! Conventions: `R(∂_i, ∂_j)∂_k = R^l_{ijk} ∂_l`, `Ric_{jk} = R^i_{ijk}`,
//! `R_{ijkl} = g_{lm} R^m_{ijk}` (so sectional curvature is `R_{ijji}`).

use rayon::prelude::*;

use crate::error::Result;
use crate::field::{
    pair_index, pair_len, sym_index, sym_len, ChristoffelField, RiemannField, ScalarField,
    SymTensorField,
};
use crate::grid::MAX_DIM;
use crate::linalg::{self, Mat};
use crate::metric::MetricField;
use crate::stencil::{central_derivative, Jet, JetSampler};

pub(crate) type T3 = [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM];
pub(crate) type T4 = [[[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];

pub(crate) const Z3: T3 = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
pub(crate) const Z4: T4 = [Z3; MAX_DIM];

/// Pointwise connection data: `gamma[k][i][j] = Γ^k_{ij}`,
/// `dgamma[m][k][i][j] = ∂_m Γ^k_{ij}`, `dg[m] = ∂_m g`.
pub(crate) struct Connection {
    pub g: Mat,
    pub ginv: Mat,
    pub dg: [Mat; MAX_DIM],
    pub gamma: T3,
    pub dgamma: T4,
}

pub(crate) fn connection(jet: &Jet, ginv: &Mat, d: usize, second: bool) -> Connection {
    // fixed-size instances let the small loops unroll
    match d {
        2 => connection_n::<2>(jet, ginv, second),
        3 => connection_n::<3>(jet, ginv, second),
        _ => connection_n::<4>(jet, ginv, second),
    }
}

fn connection_n<const D: usize>(jet: &Jet, ginv: &Mat, second: bool) -> Connection {
    let d = D;
    let g = linalg::unpack(&jet.value, d);
    let mut dg = [linalg::ZERO; MAX_DIM];
    for m in 0..d {
        dg[m] = linalg::unpack(&jet.d1[m], d);
    }
    let mut low = Z3;
    for l in 0..d {
        for i in 0..d {
            for j in i..d {
                let v = 0.5 * (dg[i][j][l] + dg[j][i][l] - dg[l][i][j]);
                low[l][i][j] = v;
                low[l][j][i] = v;
            }
        }
    }
    let mut gamma = Z3;
    for k in 0..d {
        for i in 0..d {
            for j in i..d {
                let v: f64 = (0..d).map(|l| ginv[k][l] * low[l][i][j]).sum();
                gamma[k][i][j] = v;
                gamma[k][j][i] = v;
            }
        }
    }
    let mut dgamma = Z4;
    if second {
        for m in 0..d {
            let mut ddg = [linalg::ZERO; MAX_DIM];
            for (a, dd) in ddg.iter_mut().enumerate().take(d) {
                *dd = linalg::unpack(&jet.d2[m][a], d);
            }
            // ∂_m Γ_{l,ij}
            let mut dlow = Z3;
            for l in 0..d {
                for i in 0..d {
                    for j in i..d {
                        let v = 0.5 * (ddg[i][j][l] + ddg[j][i][l] - ddg[l][i][j]);
                        dlow[l][i][j] = v;
                        dlow[l][j][i] = v;
                    }
                }
            }
            // t[a][i][j] = ∂_m g_{ab} Γ^b_{ij}
            let mut t = Z3;
            for a in 0..d {
                for i in 0..d {
                    for j in i..d {
                        let v: f64 = (0..d).map(|b| dg[m][a][b] * gamma[b][i][j]).sum();
                        t[a][i][j] = v;
                    }
                }
            }
            for k in 0..d {
                for i in 0..d {
                    for j in i..d {
                        let mut v = 0.0;
                        for l in 0..d {
                            v += ginv[k][l] * (dlow[l][i][j] - t[l][i][j]);
                        }
                        dgamma[m][k][i][j] = v;
                        dgamma[m][k][j][i] = v;
                    }
                }
            }
        }
    }
    Connection {
        g,
        ginv: *ginv,
        dg,
        gamma,
        dgamma,
    }
}

/// `R^l_{ijk}` stored as `r[l][i][j][k]`.
pub(crate) fn riemann_up(c: &Connection, d: usize) -> T4 {
    let mut r = Z4;
    for l in 0..d {
        for i in 0..d {
            for j in i + 1..d {
                for k in 0..d {
                    let mut v = c.dgamma[i][l][j][k] - c.dgamma[j][l][i][k];
                    for m in 0..d {
                        v += c.gamma[l][i][m] * c.gamma[m][j][k] - c.gamma[l][j][m] * c.gamma[m][i][k];
                    }
                    r[l][i][j][k] = v;
                    r[l][j][i][k] = -v;
                }
            }
        }
    }
    r
}

/// Ricci tensor directly from the connection (no full Riemann tensor).
pub(crate) fn ricci(c: &Connection, d: usize) -> Mat {
    match d {
        2 => ricci_n::<2>(c),
        3 => ricci_n::<3>(c),
        _ => ricci_n::<4>(c),
    }
}

fn ricci_n<const D: usize>(c: &Connection) -> Mat {
    let d = D;
    let mut tr = [0.0; MAX_DIM];
    for (m, t) in tr.iter_mut().enumerate().take(d) {
        *t = (0..d).map(|i| c.gamma[i][i][m]).sum();
    }
    let mut ric = linalg::ZERO;
    for j in 0..d {
        for k in j..d {
            let mut v = 0.0;
            for i in 0..d {
                v += c.dgamma[i][i][j][k] - c.dgamma[j][i][i][k];
                v -= (0..d).map(|m| c.gamma[i][j][m] * c.gamma[m][i][k]).sum::<f64>();
            }
            v += (0..d).map(|m| tr[m] * c.gamma[m][j][k]).sum::<f64>();
            ric[j][k] = v;
            ric[k][j] = v;
        }
    }
    ric
}

#[inline]
pub(crate) fn trace(ginv: &Mat, t: &Mat, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += ginv[i][j] * t[i][j];
        }
    }
    s
}

/// Everything curvature-related derived from one metric.
#[derive(Clone, Debug)]
pub struct CurvatureBundle {
    pub christoffel: ChristoffelField,
    pub riemann: RiemannField,
    pub ricci: SymTensorField,
    pub scalar: ScalarField,
    pub rm_norm: ScalarField,
}

/// Max-norm residuals of the algebraic symmetries of the computed curvature.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymmetryResiduals {
    /// `R_{ijkl} + R_{ijlk}`
    pub antisymmetry: f64,
    /// `R_{ijkl} - R_{klij}`
    pub pair_symmetry: f64,
    /// `R_{ijkl} + R_{iklj} + R_{iljk}`
    pub bianchi: f64,
    /// `|Ric_{jk} - R^i_{ijk}|` between the direct and traced computations
    pub ricci_trace: f64,
}

pub fn christoffel(g: &MetricField) -> ChristoffelField {
    let grid = g.grid();
    let d = grid.dim();
    let s = sym_len(d);
    let sampler = JetSampler::new(grid, s);
    let mut out = ChristoffelField::zeros(grid);
    let nc = out.components();
    out.data_mut().par_chunks_mut(nc).enumerate().for_each(|(p, o)| {
        let jet = sampler.jet(g.base().data(), p);
        let c = connection(&jet, &g.inverse_matrix(p), d, false);
        for k in 0..d {
            for i in 0..d {
                for j in i..d {
                    o[k * s + sym_index(i, j, d)] = c.gamma[k][i][j];
                }
            }
        }
    });
    out
}

struct PointCurvature {
    riemann: Vec<f64>,
    ricci: Vec<f64>,
    scalar: f64,
    rm_norm: f64,
    residuals: SymmetryResiduals,
}

fn point_curvature(sampler: &JetSampler, g: &MetricField, p: usize) -> (Connection, PointCurvature) {
    let d = g.dim();
    let jet = sampler.jet(g.base().data(), p);
    let c = connection(&jet, &g.inverse_matrix(p), d, true);
    let up = riemann_up(&c, d);
    let mut down = Z4;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    down[i][j][k][l] = (0..d).map(|m| c.g[l][m] * up[m][i][j][k]).sum();
                }
            }
        }
    }
    let mut ric_tr = linalg::ZERO;
    for j in 0..d {
        for k in 0..d {
            ric_tr[j][k] = (0..d).map(|i| up[i][i][j][k]).sum();
        }
    }
    let ric = ricci(&c, d);
    let mut res = SymmetryResiduals::default();
    for i in 0..d {
        for j in 0..d {
            res.ricci_trace = res.ricci_trace.max((ric[i][j] - ric_tr[i][j]).abs());
            for k in 0..d {
                for l in 0..d {
                    let r = down[i][j][k][l];
                    res.antisymmetry = res.antisymmetry.max((r + down[i][j][l][k]).abs());
                    res.pair_symmetry = res.pair_symmetry.max((r - down[k][l][i][j]).abs());
                    res.bianchi = res
                        .bianchi
                        .max((r + down[i][k][l][j] + down[i][l][j][k]).abs());
                }
            }
        }
    }
    // raise all four indices for |Rm|^2
    let gi = &c.ginv;
    let mut a = down;
    for _ in 0..4 {
        // contract the first slot with g^{-1} and rotate it to the back
        let mut b = Z4;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        b[j][k][l][i] = (0..d).map(|m| gi[i][m] * a[m][j][k][l]).sum();
                    }
                }
            }
        }
        a = b;
    }
    let mut norm2 = 0.0;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    norm2 += a[i][j][k][l] * down[i][j][k][l];
                }
            }
        }
    }
    let np = pair_len(d);
    let mut riemann = vec![0.0; np * np];
    for i in 0..d {
        for j in i + 1..d {
            for k in 0..d {
                for l in k + 1..d {
                    riemann[pair_index(i, j, d) * np + pair_index(k, l, d)] = down[i][j][k][l];
                }
            }
        }
    }
    let mut ricci_packed = vec![0.0; sym_len(d)];
    linalg::pack(&ric_tr, d, &mut ricci_packed);
    let scalar = trace(&c.ginv, &linalg::unpack(&ricci_packed, d), d);
    let pc = PointCurvature {
        riemann,
        ricci: ricci_packed,
        scalar,
        rm_norm: norm2.max(0.0).sqrt(),
        residuals: res,
    };
    (c, pc)
}

fn curvature_with_residuals(g: &MetricField) -> (CurvatureBundle, SymmetryResiduals) {
    let grid = g.grid();
    let d = grid.dim();
    let s = sym_len(d);
    let sampler = JetSampler::new(grid, s);
    let pts: Vec<(Vec<f64>, PointCurvature)> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let (c, pc) = point_curvature(&sampler, g, p);
            let mut gam = vec![0.0; d * s];
            for k in 0..d {
                for i in 0..d {
                    for j in i..d {
                        gam[k * s + sym_index(i, j, d)] = c.gamma[k][i][j];
                    }
                }
            }
            (gam, pc)
        })
        .collect();
    let mut chr = Vec::with_capacity(grid.len() * d * s);
    let mut riem = Vec::with_capacity(grid.len() * pair_len(d).pow(2));
    let mut ric = Vec::with_capacity(grid.len() * s);
    let mut sc = Vec::with_capacity(grid.len());
    let mut rm = Vec::with_capacity(grid.len());
    let mut res = SymmetryResiduals::default();
    for (gam, pc) in pts {
        chr.extend_from_slice(&gam);
        riem.extend_from_slice(&pc.riemann);
        ric.extend_from_slice(&pc.ricci);
        sc.push(pc.scalar);
        rm.push(pc.rm_norm);
        res.antisymmetry = res.antisymmetry.max(pc.residuals.antisymmetry);
        res.pair_symmetry = res.pair_symmetry.max(pc.residuals.pair_symmetry);
        res.bianchi = res.bianchi.max(pc.residuals.bianchi);
        res.ricci_trace = res.ricci_trace.max(pc.residuals.ricci_trace);
    }
    let bundle = CurvatureBundle {
        christoffel: ChristoffelField::from_data(grid, chr).expect("length"),
        riemann: RiemannField::from_data(grid, riem).expect("length"),
        ricci: SymTensorField::from_data(grid, ric).expect("length"),
        scalar: ScalarField::from_data(grid, sc).expect("length"),
        rm_norm: ScalarField::from_data(grid, rm).expect("length"),
    };
    (bundle, res)
}

/// Full curvature bundle of `g`.
pub fn curvature(g: &MetricField) -> CurvatureBundle {
    curvature_with_residuals(g).0
}

/// Symmetry and Bianchi residuals of the computed Riemann tensor.
pub fn symmetry_residuals(g: &MetricField) -> SymmetryResiduals {
    curvature_with_residuals(g).1
}

/// Scalar curvature only; avoids materializing the Riemann tensor.
pub fn scalar_curvature(g: &MetricField) -> ScalarField {
    let grid = g.grid();
    let d = grid.dim();
    let sampler = JetSampler::new(grid, sym_len(d));
    let mut out = ScalarField::zeros(grid);
    out.data_mut().par_iter_mut().enumerate().for_each(|(p, o)| {
        let jet = sampler.jet(g.base().data(), p);
        let c = connection(&jet, &g.inverse_matrix(p), d, true);
        *o = trace(&c.ginv, &ricci(&c, d), d);
    });
    out
}

/// Scalar curvature and `|Rm|` together.
pub fn scalar_and_rm(g: &MetricField) -> (ScalarField, ScalarField) {
    let b = curvature(g);
    (b.scalar, b.rm_norm)
}

/// Scalar curvature of `e^{2u} δ` from the conformal-change formula
/// `e^{-2u} (-2(n-1) Δu - (n-1)(n-2) |∇u|^2)`, derivatives of `u` taken
/// with the grid's central stencils.
pub fn conformal_scalar_oracle(u: &ScalarField, n: usize) -> Result<ScalarField> {
    let grid = u.grid();
    let nf = n as f64;
    let mut lap = ScalarField::zeros(grid);
    let mut grad2 = ScalarField::zeros(grid);
    for a in 0..grid.dim() {
        let d1 = central_derivative(u, a, 1)?;
        let d2 = central_derivative(u, a, 2)?;
        for p in 0..grid.len() {
            lap.data_mut()[p] += d2.value(p);
            grad2.data_mut()[p] += d1.value(p) * d1.value(p);
        }
    }
    Ok(ScalarField::from_data(
        grid,
        (0..grid.len())
            .map(|p| {
                (-2.0 * u.value(p)).exp()
                    * (-2.0 * (nf - 1.0) * lap.value(p) - (nf - 1.0) * (nf - 2.0) * grad2.value(p))
            })
            .collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PeriodicGrid;
    use std::f64::consts::PI;

    fn conformal(n: usize, eps: f64) -> (ScalarField, MetricField) {
        let g = PeriodicGrid::cubic(3, n, 1.0).unwrap();
        let u = ScalarField::from_fn(&g, |x, o| o[0] = eps * (2.0 * PI * x[0]).sin());
        let m = MetricField::conformal(&u).unwrap();
        (u, m)
    }

    #[test]
    fn flat_metrics_have_zero_curvature() {
        let g = PeriodicGrid::cubic(3, 8, 2.0).unwrap();
        for c in [1.0, 3.7] {
            let m = MetricField::new(SymTensorField::scaled_identity(&g, c)).unwrap();
            let b = curvature(&m);
            assert_eq!(b.christoffel.max_abs(), 0.0);
            assert_eq!(b.riemann.max_abs(), 0.0);
            assert_eq!(b.ricci.max_abs(), 0.0);
            assert_eq!(b.scalar.max_abs(), 0.0);
            assert_eq!(b.rm_norm.max_abs(), 0.0);
        }
    }

    #[test]
    fn diagonal_metric_christoffel_closed_form() {
        // g = diag(e^{2u(x0)}, 1, 1): Γ^0_{00} = u', everything else 0
        let grid = PeriodicGrid::cubic(3, 32, 1.0).unwrap();
        let eps = 0.1;
        let m = MetricField::from_fn(&grid, |x, o| {
            o[0] = (2.0 * eps * (2.0 * PI * x[0]).sin()).exp();
            o[3] = 1.0;
            o[5] = 1.0;
        })
        .unwrap();
        let gam = christoffel(&m);
        let mut err: f64 = 0.0;
        for p in 0..grid.len() {
            let x = grid.position(p);
            let up = eps * 2.0 * PI * (2.0 * PI * x[0]).cos();
            for k in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let exact = if k == 0 && i == 0 && j == 0 { up } else { 0.0 };
                        err = err.max((gam.get(p, k, i, j) - exact).abs());
                        assert_eq!(gam.get(p, k, i, j), gam.get(p, k, j, i));
                    }
                }
            }
        }
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn conformal_value_at_quarter() {
        let (u, m) = conformal(48, 0.01);
        let grid = m.grid().clone();
        let s = scalar_curvature(&m);
        let p = grid.index(&[12, 0, 0]);
        let expected = (-0.02f64).exp() * 16.0 * PI * PI * 0.01;
        assert!((s.value(p) - expected).abs() < 1e-5 * expected);
        assert!((expected - 1.548).abs() < 1e-3);
        let o = conformal_scalar_oracle(&u, 3).unwrap();
        assert!((o.value(p) - expected).abs() < 1e-5 * expected);
    }

    #[test]
    fn oracle_closed_form_pointwise() {
        let (u, _) = conformal(32, 0.01);
        let o = conformal_scalar_oracle(&u, 3).unwrap();
        let grid = u.grid();
        for p in (0..grid.len()).step_by(97) {
            let x = grid.position(p)[0];
            let (s, c) = ((2.0 * PI * x).sin(), (2.0 * PI * x).cos());
            let eps = 0.01;
            let exact = (-2.0 * eps * s).exp()
                * (16.0 * PI * PI * eps * s - 8.0 * PI * PI * eps * eps * c * c);
            assert!((o.value(p) - exact).abs() < 1e-4);
        }
        assert_eq!(
            conformal_scalar_oracle(&ScalarField::constant(grid, 0.7), 3)
                .unwrap()
                .max_abs(),
            0.0
        );
    }

    #[test]
    fn scalar_is_trace_of_ricci_and_paths_agree() {
        let grid = PeriodicGrid::cubic(3, 12, 1.0).unwrap();
        let m = MetricField::from_fn(&grid, |x, o| {
            let a = (2.0 * PI * x[0]).sin();
            let b = (2.0 * PI * x[1]).cos();
            o[0] = 1.0 + 0.2 * a;
            o[1] = 0.1 * b;
            o[2] = 0.05 * a * b;
            o[3] = 1.0 + 0.1 * b;
            o[4] = 0.0;
            o[5] = 1.2 + 0.1 * (2.0 * PI * x[2]).sin();
        })
        .unwrap();
        let (b, res) = curvature_with_residuals(&m);
        for p in 0..grid.len() {
            let gi = m.inverse_matrix(p);
            let ric = linalg::unpack(b.ricci.at(p), 3);
            assert_eq!(trace(&gi, &ric, 3), b.scalar.value(p));
        }
        let s2 = scalar_curvature(&m);
        assert!(b.scalar.max_abs_diff(&s2).unwrap() < 1e-10);
        assert!(res.antisymmetry < 1e-10, "{res:?}");
        assert!(res.pair_symmetry < 1e-10, "{res:?}");
        assert!(res.bianchi < 1e-10, "{res:?}");
        assert!(res.ricci_trace < 1e-10, "{res:?}");
    }

    #[test]
    fn round_sphere_patch_sign_convention() {
        // 2D: g = e^{2u} δ has R = -2 e^{-2u} Δu; with u = ε sin the sign at x = 1/4 is positive
        let grid = PeriodicGrid::cubic(2, 32, 1.0).unwrap();
        let u = ScalarField::from_fn(&grid, |x, o| o[0] = 0.05 * (2.0 * PI * x[0]).sin());
        let m = MetricField::conformal(&u).unwrap();
        let b = curvature(&m);
        let p = grid.index(&[8, 0]);
        assert!(b.scalar.value(p) > 0.0);
        // in 2D |Rm| = |R| (single sectional curvature, |Rm|^2 = 4K^2 = R^2)
        assert!((b.rm_norm.value(p) - b.scalar.value(p).abs()).abs() < 1e-10);
        let o = conformal_scalar_oracle(&u, 2).unwrap();
        assert!((o.value(p) - b.scalar.value(p)).abs() < 1e-4);
    }
}
