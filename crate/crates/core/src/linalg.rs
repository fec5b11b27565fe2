//! Dense kernels for the small symmetric matrices that live at each grid point.

use crate::field::sym_index;
use crate::grid::MAX_DIM;

pub type Mat = [[f64; MAX_DIM]; MAX_DIM];

pub const ZERO: Mat = [[0.0; MAX_DIM]; MAX_DIM];

pub fn identity(d: usize) -> Mat {
    let mut m = ZERO;
    for (i, row) in m.iter_mut().enumerate().take(d) {
        row[i] = 1.0;
    }
    m
}

#[inline]
pub fn unpack(packed: &[f64], d: usize) -> Mat {
    let mut m = ZERO;
    for i in 0..d {
        for j in i..d {
            let v = packed[sym_index(i, j, d)];
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

#[inline]
pub fn pack(m: &Mat, d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in i..d {
            out[sym_index(i, j, d)] = 0.5 * (m[i][j] + m[j][i]);
        }
    }
}

/// Inverse and determinant by Gauss-Jordan with partial pivoting.
/// Returns `None` for (numerically) singular input.
pub fn inverse(m: &Mat, d: usize) -> Option<(Mat, f64)> {
    let mut a = *m;
    let mut inv = identity(d);
    let mut det = 1.0;
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            a.swap(piv, col);
            inv.swap(piv, col);
            det = -det;
        }
        let p = a[col][col];
        det *= p;
        let ip = 1.0 / p;
        for c in 0..d {
            a[col][c] *= ip;
            inv[col][c] *= ip;
        }
        for r in 0..d {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in 0..d {
                        a[r][c] -= f * a[col][c];
                        inv[r][c] -= f * inv[col][c];
                    }
                }
            }
        }
    }
    // symmetrise: the input is symmetric, so is its inverse
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (inv[i][j] + inv[j][i]);
            inv[i][j] = v;
            inv[j][i] = v;
        }
    }
    Some((inv, det))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn sym_eigenvalues(m: &Mat, d: usize) -> [f64; MAX_DIM] {
    let mut a = *m;
    for _sweep in 0..50 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i][j] * a[i][j];
            }
        }
        let scale: f64 = (0..d).map(|i| a[i][i] * a[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev = [f64::INFINITY; MAX_DIM];
    for i in 0..d {
        ev[i] = a[i][i];
    }
    ev[..d].sort_by(f64::total_cmp);
    ev
}

/// Lower Cholesky factor, `None` unless positive definite.
pub fn cholesky(m: &Mat, d: usize) -> Option<Mat> {
    let mut l = ZERO;
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Eigenvalues of `b^{-1} a` for symmetric `a` and positive-definite `b`.
pub fn generalized_eigenvalues(a: &Mat, b: &Mat, d: usize) -> Option<[f64; MAX_DIM]> {
    let l = cholesky(b, d)?;
    // solve L X = A, then C = X L^{-T}
    let mut x = ZERO;
    for c in 0..d {
        for i in 0..d {
            let mut s = a[i][c];
            for k in 0..i {
                s -= l[i][k] * x[k][c];
            }
            x[i][c] = s / l[i][i];
        }
    }
    let mut cm = ZERO;
    for r in 0..d {
        for i in 0..d {
            let mut s = x[r][i];
            for k in 0..i {
                s -= cm[r][k] * l[i][k];
            }
            cm[r][i] = s / l[i][i];
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (cm[i][j] + cm[j][i]);
            cm[i][j] = v;
            cm[j][i] = v;
        }
    }
    Some(sym_eigenvalues(&cm, d))
}
