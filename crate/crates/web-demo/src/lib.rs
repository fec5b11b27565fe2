//! Browser front end for the lab: spike curvature slices, a live flow on a
//! small 2-torus and the cutoff profile. Everything runs on the calling thread.

use std::sync::Arc;

use ricci_lab::analysis::CutoffProfile;
use ricci_lab::curvature::scalar_curvature;
use ricci_lab::flow::{cfl_limit, Background, FlowParams, FlowState, Tracker};
use ricci_lab::generators::{spike_member, SpikeFamilySpec};
use ricci_lab::grid::PeriodicGrid;
use ricci_lab::metric::MetricField;
use ricci_lab::LabError;
use wasm_bindgen::prelude::*;

fn js(e: LabError) -> JsError {
    JsError::new(&e.to_string())
}

fn family(kind: &str, dim: usize) -> Result<SpikeFamilySpec, LabError> {
    match kind {
        "lp" => Ok(SpikeFamilySpec::lp(dim, 8)),
        "weighted-l1" => Ok(SpikeFamilySpec::weighted_l1(dim, 8, 0.25)),
        _ => Err(LabError::Argument(format!("unknown family {kind:?}"))),
    }
}

/// Values of `f` on the plane through the last axes' midpoint, row-major `n x n`.
fn central_plane(grid: &PeriodicGrid, values: &[f64]) -> Vec<f64> {
    let n = grid.shape()[0];
    let mut coords = vec![n / 2; grid.dim()];
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            coords[0] = i;
            coords[1] = j;
            out.push(values[grid.index(&coords)]);
        }
    }
    out
}

/// Scalar curvature of family member `member` on the central plane of an
/// `n^dim` torus of side `side`. `kind` is `"lp"` or `"weighted-l1"`.
#[wasm_bindgen]
pub fn spike_slice(kind: &str, dim: usize, n: usize, side: f64, member: usize) -> Result<Vec<f64>, JsError> {
    if !(2..=3).contains(&dim) {
        return Err(JsError::new("dim must be 2 or 3"));
    }
    let spec = family(kind, dim).map_err(js)?;
    let grid = PeriodicGrid::cubic(dim, n, side).map_err(js)?;
    let m = spike_member(&spec, &grid, member).map_err(js)?;
    Ok(central_plane(&grid, m.scalar.data()))
}

/// Samples of the cutoff profile and its first derivative on `[0, 1.25 outer]`,
/// interleaved as `s, value, derivative`.
#[wasm_bindgen]
pub fn cutoff_curve(inner: f64, outer: f64, samples: usize) -> Result<Vec<f64>, JsError> {
    if !(inner >= 0.0 && outer > inner) || samples < 2 {
        return Err(JsError::new("need 0 <= inner < outer and at least 2 samples"));
    }
    let p = CutoffProfile { inner, outer };
    let top = 1.25 * outer;
    Ok((0..samples)
        .flat_map(|k| {
            let s = top * k as f64 / (samples - 1) as f64;
            [s, p.value(s), p.derivative(s)]
        })
        .collect())
}

/// Ricci-DeTurck flow of a spike on the 2-torus, against the flat background.
#[wasm_bindgen]
pub struct FlowDemo {
    state: FlowState,
    params: FlowParams,
    steps: usize,
}

#[wasm_bindgen]
impl FlowDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, n: usize, side: f64, member: usize) -> Result<FlowDemo, JsError> {
        let spec = family(kind, 2).map_err(js)?;
        let grid = PeriodicGrid::cubic(2, n, side).map_err(js)?;
        let m = spike_member(&spec, &grid, member).map_err(js)?;
        let bg = Arc::new(Background::new(MetricField::euclidean(&grid)));
        let state = FlowState::new(0.0, m.metric, bg, Tracker::empty(2)).map_err(js)?;
        Ok(FlowDemo {
            state,
            params: FlowParams::default(),
            steps: 0,
        })
    }

    /// Advances `count` steps at the stability limit.
    pub fn step(&mut self, count: usize) -> Result<(), JsError> {
        for _ in 0..count {
            let dt = cfl_limit(&self.state.g, self.params.cfl_safety).min(self.params.dt_max);
            self.state = self.state.step(dt, &self.params).map_err(js)?;
            self.steps += 1;
        }
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.state.t
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn r_min(&self) -> f64 {
        self.state.scalar.min()
    }

    pub fn r_max(&self) -> f64 {
        self.state.scalar.max()
    }

    pub fn bilipschitz(&self) -> f64 {
        self.state.g.bilipschitz()
    }

    /// Current scalar curvature, row-major `n x n`.
    pub fn scalar(&self) -> Vec<f64> {
        self.state.scalar.data().to_vec()
    }
}

/// Scalar curvature of an arbitrary conformally flat 2-D metric `e^{2u} δ`,
/// `u` given row-major on an `n x n` torus of side `side`.
#[wasm_bindgen]
pub fn conformal_scalar(u: Vec<f64>, n: usize, side: f64) -> Result<Vec<f64>, JsError> {
    let grid = PeriodicGrid::cubic(2, n, side).map_err(js)?;
    let u = ricci_lab::field::ScalarField::from_data(&grid, u).map_err(js)?;
    let g = MetricField::conformal(&u).map_err(js)?;
    Ok(scalar_curvature(&g).into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_demo_keeps_minimum_nondecreasing() {
        let mut d = FlowDemo::new("lp", 24, 4.0, 1).unwrap();
        let r0 = d.r_min();
        assert!(r0 < 0.0);
        d.step(20).unwrap();
        assert_eq!(d.steps(), 20);
        assert!(d.time() > 0.0);
        assert!(d.r_min() >= r0 - 1e-9);
        assert_eq!(d.scalar().len(), 24 * 24);
    }

    #[test]
    fn slice_shapes() {
        assert_eq!(spike_slice("lp", 3, 24, 4.0, 1).unwrap().len(), 576);
        assert_eq!(spike_slice("weighted-l1", 2, 32, 4.0, 1).unwrap().len(), 1024);
        let c = cutoff_curve(0.5, 1.0, 11).unwrap();
        assert_eq!(c.len(), 33);
        assert_eq!(c[1], 1.0);
        assert_eq!(c[c.len() - 2], 0.0);
    }

    #[test]
    fn flat_conformal_factor_has_zero_curvature() {
        let r = conformal_scalar(vec![0.3; 64], 8, 1.0).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }
}
