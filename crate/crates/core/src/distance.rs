//! Graph approximations of Riemannian distance on the grid.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::field::{sym_len, ScalarField};
use crate::grid::PeriodicGrid;
use crate::linalg;
use crate::metric::{metric_length, MetricField};
use crate::stencil::MAX_SYM;

/// Neighbour set of the distance graph: primitive integer offsets with
/// entries in `-radius..=radius`. Radius 1 gives the `3^n - 1` axis and
/// diagonal neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStencil {
    pub radius: usize,
}

impl Default for GraphStencil {
    fn default() -> Self {
        Self { radius: 2 }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

struct Edge {
    offset: Vec<isize>,
    /// displacement in physical units
    v: Vec<f64>,
    /// grid offsets whose average is the midpoint metric
    mid: Vec<Vec<isize>>,
}

impl GraphStencil {
    fn edges(&self, grid: &PeriodicGrid) -> Vec<Edge> {
        let d = grid.dim();
        let r = self.radius.max(1) as isize;
        let side = (2 * r + 1) as usize;
        let mut out = Vec::new();
        for code in 0..side.pow(d as u32) {
            let mut c = code;
            let mut o = vec![0isize; d];
            for oa in o.iter_mut() {
                *oa = (c % side) as isize - r;
                c /= side;
            }
            let g = o.iter().fold(0usize, |acc, &x| gcd(acc, x.unsigned_abs()));
            if g != 1 {
                continue;
            }
            let v: Vec<f64> = (0..d).map(|a| o[a] as f64 * grid.spacing(a)).collect();
            // midpoint o/2: exact grid point on even axes, average of two on odd axes
            let mut mid: Vec<Vec<isize>> = vec![vec![]];
            for &oa in &o {
                let choices: Vec<isize> = if oa % 2 == 0 {
                    vec![oa / 2]
                } else {
                    vec![oa.div_euclid(2), oa.div_euclid(2) + 1]
                };
                mid = mid
                    .into_iter()
                    .flat_map(|m| {
                        choices.iter().map(move |&ch| {
                            let mut m2 = m.clone();
                            m2.push(ch);
                            m2
                        })
                    })
                    .collect();
            }
            out.push(Edge { offset: o, v, mid });
        }
        out
    }
}

/// Distance to a base point under a fixed metric.
#[derive(Clone, Debug)]
pub struct DistanceField {
    pub base_point: Vec<f64>,
    pub metric_time: f64,
    pub values: ScalarField,
}

impl DistanceField {
    pub fn grid(&self) -> &PeriodicGrid {
        self.values.grid()
    }

    pub fn at(&self, p: usize) -> f64 {
        self.values.value(p)
    }

    /// Distance at an off-grid position: the smallest value over the
    /// enclosing cell corners plus the metric length of the last leg.
    pub fn at_position(&self, g: &MetricField, x: &[f64]) -> f64 {
        let grid = self.grid();
        let gx = g.interpolate(x);
        grid.interpolation_stencil(x)
            .into_iter()
            .map(|(p, _)| {
                let v = grid.displacement(&grid.position(p), x);
                self.at(p) + metric_length(&gx, &v, grid.dim())
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(PartialEq)]
struct Item(f64, usize);
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties by index for determinism
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Distance from grid point `x0` under `g` with the default stencil.
pub fn distance_field(g: &MetricField, x0: usize) -> DistanceField {
    let pos = g.grid().position(x0);
    distance_from_point(g, &pos, 0.0, GraphStencil::default())
}

/// Distance from an arbitrary position: the enclosing cell corners are
/// seeded with the metric length of the straight segment to `x`.
pub fn distance_from_point(g: &MetricField, x: &[f64], metric_time: f64, stencil: GraphStencil) -> DistanceField {
    let grid = g.grid();
    let d = grid.dim();
    let s = sym_len(d);
    let n = grid.len();
    let edges = stencil.edges(grid);
    let data = g.base().data();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let gx = g.interpolate(x);
    for (p, _) in grid.interpolation_stencil(x) {
        let v = grid.displacement(&grid.position(p), x);
        let l = metric_length(&gx, &v, d);
        if l < dist[p] {
            dist[p] = l;
            heap.push(Item(l, p));
        }
    }
    let mut acc = [0.0; MAX_SYM];
    while let Some(Item(du, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        let cu = grid.coords(u);
        for e in &edges {
            let v = grid.offset_index(&cu, &e.offset);
            if done[v] {
                continue;
            }
            acc[..s].iter_mut().for_each(|a| *a = 0.0);
            for m in &e.mid {
                let q = grid.offset_index(&cu, m);
                for (a, val) in acc.iter_mut().zip(&data[q * s..(q + 1) * s]) {
                    *a += val;
                }
            }
            let inv = 1.0 / e.mid.len() as f64;
            acc[..s].iter_mut().for_each(|a| *a *= inv);
            let gm = linalg::unpack(&acc, d);
            let nd = du + metric_length(&gm, &e.v, d);
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Item(nd, v));
            }
        }
    }
    DistanceField {
        base_point: x.to_vec(),
        metric_time,
        values: ScalarField::from_data(grid, dist).expect("length"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SymTensorField;

    #[test]
    fn stencil_sizes() {
        let g = PeriodicGrid::cubic(3, 8, 1.0).unwrap();
        assert_eq!(GraphStencil { radius: 1 }.edges(&g).len(), 26);
        assert_eq!(GraphStencil { radius: 2 }.edges(&g).len(), 98);
        let g2 = PeriodicGrid::cubic(2, 8, 1.0).unwrap();
        assert_eq!(GraphStencil { radius: 1 }.edges(&g2).len(), 8);
        assert_eq!(GraphStencil { radius: 2 }.edges(&g2).len(), 16);
    }

    #[test]
    fn flat_axis_distance_and_wrap() {
        let g = PeriodicGrid::cubic(3, 16, 4.0).unwrap();
        let m = MetricField::euclidean(&g);
        let df = distance_field(&m, 0);
        assert_eq!(df.at(0), 0.0);
        let p1 = g.index(&[4, 0, 0]);
        assert!((df.at(p1) - 1.0).abs() < 1e-12);
        let p3 = g.index(&[12, 0, 0]);
        assert!((df.at(p3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn homothety_scales_distances() {
        let g = PeriodicGrid::cubic(3, 12, 4.0).unwrap();
        let m1 = MetricField::euclidean(&g);
        let m4 = MetricField::new(SymTensorField::scaled_identity(&g, 4.0)).unwrap();
        let a = distance_field(&m1, 5);
        let b = distance_field(&m4, 5);
        for p in 0..g.len() {
            assert!((b.at(p) - 2.0 * a.at(p)).abs() < 1e-12 * (1.0 + a.at(p)));
        }
    }

    #[test]
    fn flat_overestimate_is_bounded() {
        let g = PeriodicGrid::cubic(3, 24, 6.0).unwrap();
        let m = MetricField::euclidean(&g);
        let df = distance_field(&m, 0);
        let mut worst: f64 = 1.0;
        for p in 1..g.len() {
            let x = g.position(p);
            let e = g.displacement(&x, &[0.0; 3]).iter().map(|v| v * v).sum::<f64>().sqrt();
            if e > 1.0 {
                worst = worst.max(df.at(p) / e);
            }
            assert!(df.at(p) >= e - 1e-12);
        }
        assert!(worst < 1.05, "worst {worst}");
    }

    #[test]
    fn off_grid_source_seeding() {
        let g = PeriodicGrid::cubic(2, 16, 4.0).unwrap();
        let m = MetricField::euclidean(&g);
        let df = distance_from_point(&m, &[0.1, 0.0], 0.0, GraphStencil::default());
        assert!((df.at(0) - 0.1).abs() < 1e-12);
        assert!((df.at(g.index(&[4, 0])) - 0.9).abs() < 1e-12);
        // corner detour: an upper bound on the true distance
        assert!((df.at_position(&m, &[0.1, 0.0]) - 0.2).abs() < 1e-12);
    }
}
