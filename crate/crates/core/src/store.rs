//! On-disk trajectories: `trajectory.json` plus binary snapshot fields.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{SymTensorField, VectorField};
use crate::flow::{Background, FittedConstants, FlowParams, FlowState, FlowTrajectory, SeriesPoint, Tracker};
use crate::io::{read_binary, write_binary};
use crate::metric::MetricField;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    t: f64,
    metric: String,
    /// displacement field for full-grid trackers
    displacement: Option<String>,
    /// the tracker itself otherwise
    tracker: Option<Tracker>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrajectoryFile {
    params: FlowParams,
    fitted: FittedConstants,
    dt_initial: f64,
    steps: usize,
    /// `None` for the flat background
    background: Option<String>,
    snapshots: Vec<SnapshotEntry>,
    series: Vec<SeriesPoint>,
}

/// Writes the trajectory under `dir` (`trajectory.json`, `fields/*.bin`).
pub fn save_trajectory(traj: &FlowTrajectory, dir: &Path) -> Result<()> {
    let fields = dir.join("fields");
    std::fs::create_dir_all(&fields).map_err(|e| LabError::io(&fields, e))?;
    let bg = &traj.initial().background;
    let background = if bg.is_flat() {
        None
    } else {
        write_binary(bg.metric().base(), &fields.join("background.bin"))?;
        Some("fields/background.bin".to_string())
    };
    let mut snapshots = Vec::new();
    for (k, st) in traj.states.iter().enumerate() {
        let metric = format!("fields/g_{k:03}.bin");
        write_binary(st.g.base(), &dir.join(&metric))?;
        let (displacement, tracker) = if st.tracker.is_full_grid() {
            let name = format!("fields/disp_{k:03}.bin");
            let f = VectorField::from_data(st.g.grid(), st.tracker.displacements().to_vec())?;
            write_binary(&f, &dir.join(&name))?;
            (Some(name), None)
        } else {
            (None, Some(st.tracker.clone()))
        };
        snapshots.push(SnapshotEntry {
            t: st.t,
            metric,
            displacement,
            tracker,
        });
    }
    let file = TrajectoryFile {
        params: traj.params.clone(),
        fitted: traj.fitted.clone(),
        dt_initial: traj.dt_initial,
        steps: traj.steps,
        background,
        snapshots,
        series: traj.series.clone(),
    };
    let path = dir.join("trajectory.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| LabError::io(&path, e))
}

/// Reads a trajectory written by [`save_trajectory`]; diagnostics are recomputed.
pub fn load_trajectory(dir: &Path) -> Result<FlowTrajectory> {
    let path = dir.join("trajectory.json");
    let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let file: TrajectoryFile = serde_json::from_slice(&bytes)?;
    if file.snapshots.is_empty() {
        return Err(LabError::arg(format!("{}: no snapshots", path.display())));
    }
    let first: SymTensorField = read_binary(&dir.join(&file.snapshots[0].metric))?;
    let grid = first.grid().clone();
    let h = match &file.background {
        Some(p) => MetricField::new(read_binary(&dir.join(p))?)?,
        None => MetricField::euclidean(&grid),
    };
    let bg = Arc::new(Background::new(h));
    let mut states = Vec::with_capacity(file.snapshots.len());
    for e in &file.snapshots {
        let g = MetricField::new(read_binary(&dir.join(&e.metric))?)?;
        let tracker = match (&e.displacement, &e.tracker) {
            (Some(p), _) => {
                let f: VectorField = read_binary(&dir.join(p))?;
                Tracker::full_grid(&grid).with_displacements(f.into_data())?
            }
            (None, Some(t)) => t.clone(),
            (None, None) => Tracker::empty(grid.dim()),
        };
        states.push(FlowState::new(e.t, g, bg.clone(), tracker)?);
    }
    Ok(FlowTrajectory {
        states,
        params: file.params,
        fitted: file.fitted,
        series: file.series,
        dt_initial: file.dt_initial,
        steps: file.steps,
    })
}
