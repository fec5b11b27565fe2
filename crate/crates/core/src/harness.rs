//! Family × flow × audit pipelines and their on-disk records.
//!
//! Output tree:
//!
//! ```text
//! out/<name>/config.{ini,json}       verbatim copy of the config
//! out/<name>/record.json             RunRecord
//! out/<name>/report.{md,csv,gp}
//! out/<name>/<member>/manifest.json
//! out/<name>/<member>/{series,steps,prop31,barrier,gaussian}.csv
//! out/<name>/<member>/trajectory.json, fields/*.bin
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    ball_inclusion_check, barrier_audit, distance_drop_fit, shared_prop31_constants, weighted_l1_sup,
    BallInclusionReport, BarrierReport, CutoffParams, Prop31Report, FIT_SLACK,
};
use crate::config::{AuditSection, ExperimentConfig, FamilySource, GridSection, LoadedConfig};
use crate::error::{LabError, Result};
use crate::field::SymTensorField;
use crate::flow::{run, FlowTrajectory, Tracker};
use crate::generators::{glued_metric, spike_member, GlueSpec, MemberCertificate};
use crate::heat::{gaussian_bound_fit, green_function, GaussianFit, GaussianVerdict};
use crate::io::{read_binary, write_binary};
use crate::metric::MetricField;
use crate::store::{load_trajectory, save_trajectory};

/// Half-width of the accepted band around `δ - 1` for the barrier slope.
pub const SLOPE_BAND: f64 = 0.15;
/// Mass tolerance of kernel runs.
pub const MASS_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    HypothesesUnmet,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemberStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditEntry<T> {
    pub verdict: Verdict,
    pub report: Option<T>,
    pub error: Option<String>,
    pub csv: Option<String>,
    pub tolerances: BTreeMap<String, f64>,
}

impl<T> AuditEntry<T> {
    fn failed(e: &LabError) -> Self {
        Self {
            verdict: Verdict::Error,
            report: None,
            error: Some(e.to_string()),
            csv: None,
            tolerances: BTreeMap::new(),
        }
    }
}

/// Min-R monotonicity along the snapshots, up to `tol_fd = 10 h^2 max|D^4 g|`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RminCheck {
    pub holds: bool,
    pub tol_fd: f64,
    pub worst_drop: f64,
}

pub fn rmin_monotonicity(traj: &FlowTrajectory) -> RminCheck {
    let h = traj.grid().min_spacing();
    let d4 = traj.states.iter().map(|s| s.monitors.max_d4g).fold(0.0, f64::max);
    let tol_fd = 10.0 * h * h * d4;
    let mut worst: f64 = 0.0;
    for w in traj.states.windows(2) {
        worst = worst.max(w[0].monitors.r_min - w[1].monitors.r_min);
    }
    RminCheck {
        holds: worst <= tol_fd,
        tol_fd,
        worst_drop: worst,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianEntry {
    pub fit: GaussianFit,
    pub width: f64,
    pub source: usize,
    pub max_mass_error: f64,
    pub min_value: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BarrierEntry {
    pub barrier: BarrierReport,
    pub slope_target: f64,
    pub slope_within_band: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowSummary {
    pub steps: usize,
    pub dt_initial: f64,
    pub t_final: f64,
    pub fitted: crate::flow::FittedConstants,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemberManifest {
    pub member: String,
    pub index: usize,
    pub status: MemberStatus,
    pub error: Option<String>,
    pub started: f64,
    pub finished: f64,
    pub grid: GridSection,
    pub x0: Vec<f64>,
    /// family target (κ or σ) used when an audit leaves σ unset
    pub target: f64,
    pub delta: f64,
    pub scan_radii: Vec<f64>,
    pub certificate: Option<MemberCertificate>,
    pub flow: Option<FlowSummary>,
    pub rmin_monotone: Option<RminCheck>,
    pub prop31: Option<AuditEntry<Prop31Report>>,
    pub prop41: Option<AuditEntry<BarrierEntry>>,
    pub ball_inclusion: Option<AuditEntry<BallInclusionReport>>,
    pub gaussian_bound: Option<AuditEntry<GaussianEntry>>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub csv_files: Vec<String>,
}

/// Fitted constants of one member, as tabulated in the record and report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsRow {
    pub c5: Option<f64>,
    pub c6: Option<f64>,
    pub c7: Option<f64>,
    pub lhs_fixed: Option<f64>,
    pub l_barrier: Option<f64>,
    pub epsilon: Option<f64>,
    pub slope: Option<f64>,
    pub c_gauss: Option<f64>,
    pub ball_margin: Option<f64>,
    pub c_disp: Option<f64>,
    pub a_rm: Option<f64>,
    pub c0_dist: Option<f64>,
}

impl ConstantsRow {
    pub const NAMES: [&'static str; 12] = [
        "c5",
        "c6",
        "c7",
        "lhs_fixed",
        "l_barrier",
        "epsilon",
        "slope",
        "c_gauss",
        "ball_margin",
        "c_disp",
        "a_rm",
        "c0_dist",
    ];

    pub fn values(&self) -> [Option<f64>; 12] {
        [
            self.c5,
            self.c6,
            self.c7,
            self.lhs_fixed,
            self.l_barrier,
            self.epsilon,
            self.slope,
            self.c_gauss,
            self.ball_margin,
            self.c_disp,
            self.a_rm,
            self.c0_dist,
        ]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemberSummary {
    pub member: String,
    pub index: usize,
    pub status: MemberStatus,
    pub error: Option<String>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub constants: ConstantsRow,
}

/// Cross-member uniformity tables.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SharedTables {
    /// shared `(C_6, C_7)`: largest member `C_6`, smallest `C_7` valid for all
    pub c6: Option<f64>,
    pub c7: Option<f64>,
    pub prop31_shared_holds: Option<bool>,
    pub t_fixed: Option<f64>,
    pub lhs_decreasing: Option<bool>,
    pub l_min: Option<f64>,
    pub l_max: Option<f64>,
    pub l_ratio: Option<f64>,
    pub slopes_within_band: Option<bool>,
    pub rmin_monotone: Option<bool>,
    pub ball_inclusion_holds: Option<bool>,
    pub c_gauss_max: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub config_file: String,
    pub started: f64,
    pub finished: f64,
    pub audits: Vec<String>,
    pub members: Vec<MemberSummary>,
    pub shared: SharedTables,
}

impl RunRecord {
    pub fn failures(&self) -> usize {
        self.members.iter().filter(|m| m.status == MemberStatus::Failed).count()
    }

    /// Directory of the run inside `out`.
    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(&self.name)
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v:.10e}")
}

/// Everything an audit needs besides the trajectory.
#[derive(Clone, Debug)]
pub struct AuditContext {
    pub x0: Vec<f64>,
    pub target: f64,
    pub delta: f64,
    pub scan_radii: Vec<f64>,
    pub certificate: Option<MemberCertificate>,
}

impl AuditContext {
    fn of_manifest(m: &MemberManifest) -> Self {
        Self {
            x0: m.x0.clone(),
            target: m.target,
            delta: m.delta,
            scan_radii: m.scan_radii.clone(),
            certificate: m.certificate.clone(),
        }
    }
}

/// Results of running the configured audits on one trajectory.
#[derive(Clone, Debug)]
pub struct AuditResults {
    pub rmin: RminCheck,
    pub prop31: Option<AuditEntry<Prop31Report>>,
    pub prop41: Option<AuditEntry<BarrierEntry>>,
    pub ball_inclusion: Option<AuditEntry<BallInclusionReport>>,
    pub gaussian_bound: Option<AuditEntry<GaussianEntry>>,
    pub c0_dist: Option<f64>,
    /// `(file name, contents)` of the residual tables
    pub tables: Vec<(String, String)>,
    pub kernel_fields: Vec<(String, crate::field::ScalarField)>,
}

impl AuditResults {
    pub fn verdicts(&self) -> BTreeMap<String, Verdict> {
        let mut v = BTreeMap::new();
        if let Some(e) = &self.prop31 {
            v.insert("prop31".into(), e.verdict);
        }
        if let Some(e) = &self.prop41 {
            v.insert("prop41".into(), e.verdict);
        }
        if let Some(e) = &self.ball_inclusion {
            v.insert("ball_inclusion".into(), e.verdict);
        }
        if let Some(e) = &self.gaussian_bound {
            v.insert("gaussian_bound".into(), e.verdict);
        }
        v
    }
}

fn series_csv(traj: &FlowTrajectory, energy: Option<&[f64]>) -> String {
    let mut s = String::from("t,r_min,r_max,bilipschitz,t_dg2,t_d2g,t_rm,volume,max_displacement");
    if energy.is_some() {
        s.push_str(",energy");
    }
    s.push('\n');
    for (k, st) in traj.states.iter().enumerate() {
        let m = &st.monitors;
        let row = [st.t, m.r_min, m.r_max, m.bilipschitz, m.t_dg2, m.t_d2g, m.t_rm, m.volume, m.max_displacement];
        s.push_str(&row.iter().map(|v| num(*v)).collect::<Vec<_>>().join(","));
        if let Some(e) = energy {
            s.push(',');
            s.push_str(&num(e[k]));
        }
        s.push('\n');
    }
    s
}

fn steps_csv(traj: &FlowTrajectory) -> String {
    let mut s = String::from("step,t,dt,r_min,r_max\n");
    for p in &traj.series {
        let _ = writeln!(s, "{},{},{},{},{}", p.step, num(p.t), num(p.dt), num(p.r_min), num(p.r_max));
    }
    s
}

/// Runs the audits of `audits` on `traj`. Pure in the trajectory data; the
/// fitted constants of `traj` are updated in place.
pub fn audit_trajectory(traj: &mut FlowTrajectory, ctx: &AuditContext, audits: &AuditSection) -> AuditResults {
    let grid = traj.grid().clone();
    let n = grid.dim() as f64;
    let mut tables = Vec::new();
    let mut kernel_fields = Vec::new();
    let rmin = rmin_monotonicity(traj);
    let c0_dist = distance_drop_fit(traj, &ctx.x0).ok();
    traj.fitted.c0_dist = c0_dist;

    let mut energy = None;
    let prop31 = audits.prop31.as_ref().map(|p| {
        let sigma = p.sigma.unwrap_or(ctx.target);
        let mut cut = CutoffParams::new(grid.dim(), c0_dist.unwrap_or(0.0), p.radius);
        cut.rate = p.rate;
        match crate::analysis::prop31_audit(traj, sigma, &ctx.x0, p.radius, &cut) {
            Ok(rep) => {
                traj.fitted.c6 = Some(rep.c6);
                traj.fitted.c7 = Some(rep.c7);
                let mut csv = String::from("t,lhs,rhs_initial,energy,bound\n");
                for r in &rep.rows {
                    let s = r.t.sqrt() / rep.r_scale;
                    let bound = (rep.c6 * s).exp() * r.rhs_initial + rep.c7 * s;
                    let _ = writeln!(csv, "{},{},{},{},{}", num(r.t), num(r.lhs), num(r.rhs_initial), num(r.energy), num(bound));
                }
                energy = Some(rep.rows.iter().map(|r| r.energy).collect::<Vec<_>>());
                tables.push(("prop31.csv".to_string(), csv));
                let mut tol = BTreeMap::new();
                tol.insert("fit_slack".into(), FIT_SLACK);
                tol.insert("rate".into(), p.rate);
                AuditEntry {
                    verdict: if rep.holds { Verdict::Pass } else { Verdict::Fail },
                    report: Some(rep),
                    error: None,
                    csv: Some("prop31.csv".into()),
                    tolerances: tol,
                }
            }
            Err(e) => AuditEntry::failed(&e),
        }
    });

    let prop41 = audits.prop41.as_ref().map(|p| {
        let sigma = p.sigma.unwrap_or(ctx.target);
        let delta = p.delta.unwrap_or(ctx.delta);
        let epsilon = match p.epsilon {
            Some(e) => Ok(e),
            None => {
                let flat = MetricField::euclidean(&grid);
                let x = grid.nearest_index(&ctx.x0);
                weighted_l1_sup(&traj.initial().scalar, sigma, delta, &flat, &[x], &ctx.scan_radii).map(|s| s.value)
            }
        };
        // parabolic window sqrt(2 n t) in [core width, deficit radius], fixed by the initial data
        let window = ctx.certificate.as_ref().and_then(|c| {
            let lo = c.width * c.width / (2.0 * n);
            let hi = c.deficit_radius * c.deficit_radius / (2.0 * n);
            (hi > lo).then_some((lo, hi))
        });
        match epsilon.and_then(|eps| barrier_audit(traj, sigma, delta, eps, p.lambda, window)) {
            Ok(rep) => {
                traj.fitted.l_barrier = Some(rep.l_barrier);
                let mut csv = String::from("t,max_negative_part,threshold,l_eps_bound\n");
                for &(t, m) in &rep.profile {
                    let (thr, lb) = if t > 0.0 {
                        (rep.lambda * t.powf(-rep.alpha), rep.l_barrier * rep.epsilon * t.powf(-rep.alpha))
                    } else {
                        (f64::INFINITY, f64::INFINITY)
                    };
                    let _ = writeln!(csv, "{},{},{},{}", num(t), num(m), num(thr), num(lb));
                }
                tables.push(("barrier.csv".to_string(), csv));
                let target = delta - 1.0;
                let within = rep.slope.map(|s| (s - target).abs() <= SLOPE_BAND);
                let ok = rep.first_violation_time.is_none() && rep.l_barrier.is_finite();
                let mut tol = BTreeMap::new();
                tol.insert("slope_band".into(), SLOPE_BAND);
                AuditEntry {
                    verdict: if ok { Verdict::Pass } else { Verdict::Fail },
                    report: Some(BarrierEntry {
                        barrier: rep,
                        slope_target: target,
                        slope_within_band: within,
                    }),
                    error: None,
                    csv: Some("barrier.csv".into()),
                    tolerances: tol,
                }
            }
            Err(e) => AuditEntry::failed(&e),
        }
    });

    let ball_inclusion = audits.ball_inclusion.as_ref().map(|b| match ball_inclusion_check(traj, &ctx.x0, b.r0) {
        Ok(rep) => AuditEntry {
            verdict: if rep.holds { Verdict::Pass } else { Verdict::Fail },
            report: Some(rep),
            error: None,
            csv: None,
            tolerances: BTreeMap::new(),
        },
        Err(e) => AuditEntry::failed(&e),
    });

    let gaussian_bound = audits.gaussian_bound.as_ref().map(|gs| {
        let src = gs.source.clone().unwrap_or_else(|| ctx.x0.clone());
        let y = grid.nearest_index(&src);
        let res = green_function(traj, y, &gs.kernel()).and_then(|kr| {
            let fit = gaussian_bound_fit(&kr, traj, &gs.fit())?;
            Ok((kr, fit))
        });
        match res {
            Ok((kr, fit)) => {
                traj.fitted.c_gauss = Some(fit.c);
                let mut csv = String::from("t,kernel_time,mass,min_value,c_snapshot\n");
                for (s, (_, c)) in kr.snapshots.iter().zip(&fit.per_snapshot) {
                    let _ = writeln!(csv, "{},{},{},{},{}", num(s.t), num(s.kernel_time), num(s.mass), num(s.min_value), num(*c));
                }
                tables.push(("gaussian.csv".to_string(), csv));
                if gs.dump {
                    for (k, s) in kr.snapshots.iter().enumerate() {
                        kernel_fields.push((format!("fields/kernel_{k:03}.bin"), s.values.clone()));
                    }
                }
                let mass_err = kr.max_mass_error();
                let verdict = if !(fit.c.is_finite() && mass_err <= MASS_TOLERANCE) {
                    Verdict::Fail
                } else if fit.verdict == GaussianVerdict::HypothesesUnmet {
                    Verdict::HypothesesUnmet
                } else {
                    Verdict::Pass
                };
                let mut tol = BTreeMap::new();
                tol.insert("mass".into(), MASS_TOLERANCE);
                tol.insert("floor".into(), gs.fit().floor);
                AuditEntry {
                    verdict,
                    report: Some(GaussianEntry {
                        width: kr.width,
                        source: y,
                        max_mass_error: mass_err,
                        min_value: kr.min_value(),
                        steps: kr.steps,
                        fit,
                    }),
                    error: None,
                    csv: Some("gaussian.csv".into()),
                    tolerances: tol,
                }
            }
            Err(e) => AuditEntry::failed(&e),
        }
    });

    tables.insert(0, ("series.csv".to_string(), series_csv(traj, energy.as_deref())));
    tables.insert(1, ("steps.csv".to_string(), steps_csv(traj)));
    AuditResults {
        rmin,
        prop31,
        prop41,
        ball_inclusion,
        gaussian_bound,
        c0_dist,
        tables,
        kernel_fields,
    }
}

/// Initial metric and context of one family member.
pub struct MemberSetup {
    pub name: String,
    pub index: usize,
    pub metric: MetricField,
    pub ctx: AuditContext,
}

pub fn member_name(index: usize) -> String {
    format!("member-{index:02}")
}

/// Generates (and optionally glues) the initial metric of member `index`.
pub fn setup_member(cfg: &ExperimentConfig, index: usize) -> Result<MemberSetup> {
    let grid = cfg.grid.build()?;
    let dim = grid.dim();
    let center_default: Vec<f64> = grid.side().iter().map(|l| 0.5 * l).collect();
    let spec = cfg.family.spike_spec(dim);
    let (metric, certificate) = match cfg.family.kind {
        FamilySource::Flat => (MetricField::euclidean(&grid), None),
        FamilySource::File => {
            let path = cfg.family.path.as_ref().ok_or_else(|| LabError::Config("family.path missing".into()))?;
            let base: SymTensorField = read_binary(path)?;
            if base.grid() != &grid {
                return Err(LabError::Config(format!("{} does not match the configured grid", path.display())));
            }
            (MetricField::new(base)?, None)
        }
        FamilySource::Lp | FamilySource::WeightedL1 => {
            let spec = spec.as_ref().expect("spike spec");
            let m = spike_member(spec, &grid, index)?;
            (m.metric, Some(m.certificate))
        }
    };
    let center = spec
        .as_ref()
        .map(|s| s.center_on(&grid))
        .or_else(|| cfg.family.center.clone())
        .unwrap_or(center_default);
    let metric = match &cfg.glue {
        Some(gl) => glued_metric(&GlueSpec {
            inner: metric.into_base(),
            center: center.clone(),
            inner_radius: gl.inner_radius,
            outer_radius: gl.outer_radius,
        })?,
        None => metric,
    };
    let x0 = cfg.audit.x0.clone().unwrap_or(center);
    // base points are snapped to the grid so they are tracked exactly
    let x0 = grid.position(grid.nearest_index(&x0));
    let (target, delta, scan_radii) = match &spec {
        Some(s) => (s.target, s.delta, s.scan_radii.clone()),
        None => (
            cfg.family.target.unwrap_or(0.0),
            cfg.family.delta.unwrap_or(0.25),
            cfg.family
                .scan_radii
                .clone()
                .unwrap_or_else(|| vec![0.25, 0.5, 0.75, 1.0]),
        ),
    };
    Ok(MemberSetup {
        name: member_name(index),
        index,
        metric,
        ctx: AuditContext {
            x0,
            target,
            delta,
            scan_radii,
            certificate,
        },
    })
}

fn write_member_outputs(dir: &Path, manifest: &mut MemberManifest, results: &AuditResults) -> Result<()> {
    manifest.csv_files.clear();
    for (name, body) in &results.tables {
        write_file(&dir.join(name), body.as_bytes())?;
        manifest.csv_files.push(name.clone());
    }
    if !results.kernel_fields.is_empty() {
        let fields = dir.join("fields");
        std::fs::create_dir_all(&fields).map_err(|e| LabError::io(&fields, e))?;
        for (name, f) in &results.kernel_fields {
            write_binary(f, &dir.join(name))?;
        }
    }
    manifest.rmin_monotone = Some(results.rmin.clone());
    manifest.prop31 = results.prop31.clone();
    manifest.prop41 = results.prop41.clone();
    manifest.ball_inclusion = results.ball_inclusion.clone();
    manifest.gaussian_bound = results.gaussian_bound.clone();
    manifest.verdicts = results.verdicts();
    Ok(())
}

fn write_manifest(dir: &Path, m: &MemberManifest) -> Result<()> {
    write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(m)?)
}

pub fn read_manifest(dir: &Path) -> Result<MemberManifest> {
    let p = dir.join("manifest.json");
    let bytes = std::fs::read(&p).map_err(|e| LabError::io(&p, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn failed_verdicts(audits: &AuditSection) -> BTreeMap<String, Verdict> {
    audits.names().into_iter().map(|a| (a.to_string(), Verdict::Error)).collect()
}

/// Generates, flows and audits one member inside `tmp`.
fn run_member_in(cfg: &ExperimentConfig, index: usize, tmp: &Path) -> MemberManifest {
    let started = now();
    let mut manifest = MemberManifest {
        member: member_name(index),
        index,
        status: MemberStatus::Failed,
        error: None,
        started,
        finished: started,
        grid: cfg.grid.clone(),
        x0: Vec::new(),
        target: 0.0,
        delta: 0.25,
        scan_radii: Vec::new(),
        certificate: None,
        flow: None,
        rmin_monotone: None,
        prop31: None,
        prop41: None,
        ball_inclusion: None,
        gaussian_bound: None,
        verdicts: failed_verdicts(&cfg.audit),
        csv_files: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let setup = setup_member(cfg, index)?;
        manifest.x0 = setup.ctx.x0.clone();
        manifest.target = setup.ctx.target;
        manifest.delta = setup.ctx.delta;
        manifest.scan_radii = setup.ctx.scan_radii.clone();
        manifest.certificate = setup.ctx.certificate.clone();
        let grid = setup.metric.grid().clone();
        let tracker = if cfg.flow.track_full_grid {
            Tracker::full_grid(&grid)
        } else {
            Tracker::with_probes(&grid, &[setup.ctx.x0.clone()])?
        };
        let h = MetricField::euclidean(&grid);
        let mut traj = match run(setup.metric, h, &cfg.flow.params(), &cfg.flow.schedule()?, tracker) {
            Ok(t) => t,
            Err(abort) => {
                let partial = abort.partial;
                save_trajectory(&partial, tmp)?;
                manifest.flow = Some(FlowSummary {
                    steps: partial.steps,
                    dt_initial: partial.dt_initial,
                    t_final: partial.last().t,
                    fitted: partial.fitted.clone(),
                    aborted: Some(abort.error.to_string()),
                });
                return Err(abort.error);
            }
        };
        let results = audit_trajectory(&mut traj, &setup.ctx, &cfg.audit);
        save_trajectory(&traj, tmp)?;
        manifest.flow = Some(FlowSummary {
            steps: traj.steps,
            dt_initial: traj.dt_initial,
            t_final: traj.last().t,
            fitted: traj.fitted.clone(),
            aborted: None,
        });
        write_member_outputs(tmp, &mut manifest, &results)?;
        Ok(())
    })();
    match result {
        Ok(()) => manifest.status = MemberStatus::Ok,
        Err(e) => manifest.error = Some(e.to_string()),
    }
    manifest.finished = now();
    manifest
}

/// Runs one member and moves its directory into place atomically.
pub fn run_member(cfg: &ExperimentConfig, index: usize, run_dir: &Path) -> Result<MemberManifest> {
    let name = member_name(index);
    let tmp = run_dir.join(format!(".{name}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    let manifest = run_member_in(cfg, index, &tmp);
    write_manifest(&tmp, &manifest)?;
    let dst = run_dir.join(&name);
    if dst.exists() {
        std::fs::remove_dir_all(&dst).map_err(|e| LabError::io(&dst, e))?;
    }
    std::fs::rename(&tmp, &dst).map_err(|e| LabError::io(&dst, e))?;
    Ok(manifest)
}

/// Re-runs the audits of a stored member directory and rewrites its outputs.
pub fn audit_member_dir(dir: &Path, audits: &AuditSection) -> Result<MemberManifest> {
    let mut manifest = read_manifest(dir)?;
    let mut traj = load_trajectory(dir)?;
    let ctx = AuditContext::of_manifest(&manifest);
    let results = audit_trajectory(&mut traj, &ctx, audits);
    write_member_outputs(dir, &mut manifest, &results)?;
    if let Some(f) = manifest.flow.as_mut() {
        f.fitted = traj.fitted.clone();
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn constants_of(m: &MemberManifest, t_fixed: Option<f64>) -> ConstantsRow {
    let p31 = m.prop31.as_ref().and_then(|e| e.report.as_ref());
    let p41 = m.prop41.as_ref().and_then(|e| e.report.as_ref());
    let fitted = m.flow.as_ref().map(|f| &f.fitted);
    ConstantsRow {
        c5: p31.map(|r| r.c5),
        c6: p31.map(|r| r.c6),
        c7: p31.map(|r| r.c7),
        lhs_fixed: p31.zip(t_fixed).and_then(|(r, t)| r.lhs_at(t)),
        l_barrier: p41.map(|r| r.barrier.l_barrier),
        epsilon: p41.map(|r| r.barrier.epsilon),
        slope: p41.and_then(|r| r.barrier.slope),
        c_gauss: m.gaussian_bound.as_ref().and_then(|e| e.report.as_ref()).map(|r| r.fit.c),
        ball_margin: m.ball_inclusion.as_ref().and_then(|e| e.report.as_ref()).map(|r| r.margin),
        c_disp: fitted.map(|f| f.c_disp),
        a_rm: fitted.map(|f| f.a_rm),
        c0_dist: fitted.and_then(|f| f.c0_dist),
    }
}

/// Single-threaded aggregation over member manifests.
pub fn aggregate(cfg: &ExperimentConfig, manifests: &[MemberManifest]) -> (Vec<MemberSummary>, SharedTables) {
    let t_fixed = cfg.audit.prop31.as_ref().map(|p| p.t_fixed * p.radius * p.radius);
    let members: Vec<MemberSummary> = manifests
        .iter()
        .map(|m| MemberSummary {
            member: m.member.clone(),
            index: m.index,
            status: m.status,
            error: m.error.clone(),
            verdicts: m.verdicts.clone(),
            constants: constants_of(m, t_fixed),
        })
        .collect();
    let ok: Vec<&MemberManifest> = manifests.iter().filter(|m| m.status == MemberStatus::Ok).collect();
    let mut shared = SharedTables::default();
    let reports: Vec<Prop31Report> = ok
        .iter()
        .filter_map(|m| m.prop31.as_ref().and_then(|e| e.report.clone()))
        .collect();
    if !reports.is_empty() {
        let (c6, c7) = shared_prop31_constants(&reports);
        shared.c6 = Some(c6);
        shared.c7 = Some(c7);
        shared.prop31_shared_holds = Some(reports.iter().all(|r| r.holds_with(FIT_SLACK * c6, FIT_SLACK * c7)));
        shared.t_fixed = t_fixed;
        let lhs: Vec<f64> = members
            .iter()
            .filter(|m| m.status == MemberStatus::Ok)
            .filter_map(|m| m.constants.lhs_fixed)
            .collect();
        shared.lhs_decreasing = Some(lhs.windows(2).all(|w| w[1] < w[0]));
    }
    let ls: Vec<f64> = ok
        .iter()
        .filter_map(|m| m.prop41.as_ref().and_then(|e| e.report.as_ref()))
        .map(|r| r.barrier.l_barrier)
        .collect();
    if !ls.is_empty() {
        let lo = ls.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ls.iter().cloned().fold(0.0, f64::max);
        shared.l_min = Some(lo);
        shared.l_max = Some(hi);
        shared.l_ratio = Some(if hi == 0.0 { 1.0 } else { hi / lo });
        // members without negativity have no slope; the rest must have one inside the band
        let slopes: Vec<Option<bool>> = ok
            .iter()
            .filter_map(|m| m.prop41.as_ref().and_then(|e| e.report.as_ref()))
            .filter(|r| r.barrier.l_barrier > 0.0)
            .map(|r| r.slope_within_band)
            .collect();
        if slopes.iter().any(|s| s.is_some()) {
            shared.slopes_within_band = Some(slopes.iter().all(|s| *s == Some(true)));
        }
    }
    if !ok.is_empty() {
        shared.rmin_monotone = Some(ok.iter().all(|m| m.rmin_monotone.as_ref().is_some_and(|r| r.holds)));
    }
    let balls: Vec<bool> = ok
        .iter()
        .filter_map(|m| m.ball_inclusion.as_ref())
        .map(|e| e.verdict == Verdict::Pass)
        .collect();
    if !balls.is_empty() {
        shared.ball_inclusion_holds = Some(balls.iter().all(|&b| b));
    }
    let cg: Vec<f64> = members.iter().filter_map(|m| m.constants.c_gauss).collect();
    if !cg.is_empty() {
        shared.c_gauss_max = Some(cg.iter().cloned().fold(0.0, f64::max));
    }
    (members, shared)
}

/// Full pipeline: validate, run members (concurrently, `jobs` at a time),
/// aggregate, persist the record and the report.
pub fn run_experiment(loaded: &LoadedConfig, out: &Path) -> Result<RunRecord> {
    let cfg = &loaded.config;
    cfg.validate()?;
    let started = now();
    let run_dir = out.join(&cfg.experiment.name);
    std::fs::create_dir_all(&run_dir).map_err(|e| LabError::io(&run_dir, e))?;
    let config_file = format!("config.{}", loaded.format);
    write_file(&run_dir.join(&config_file), &loaded.source)?;
    let indices = cfg.family.member_indices();
    let stop = AtomicBool::new(false);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.jobs)
        .build()
        .map_err(|e| LabError::Numerical(e.to_string()))?;
    let results: Vec<Option<Result<MemberManifest>>> = pool.install(|| {
        indices
            .par_iter()
            .with_max_len(1)
            .map(|&i| {
                if stop.load(Ordering::SeqCst) {
                    return None;
                }
                let r = run_member(cfg, i, &run_dir);
                if cfg.experiment.strict && !matches!(&r, Ok(m) if m.status == MemberStatus::Ok) {
                    stop.store(true, Ordering::SeqCst);
                }
                Some(r)
            })
            .collect()
    });
    let mut manifests = Vec::new();
    for r in results.into_iter().flatten() {
        manifests.push(r?);
    }
    let (members, shared) = aggregate(cfg, &manifests);
    let record = RunRecord {
        name: cfg.experiment.name.clone(),
        config_hash: sha256_hex(&loaded.source),
        config_file,
        started,
        finished: now(),
        audits: cfg.audit.names().into_iter().map(String::from).collect(),
        members,
        shared,
    };
    write_file(&run_dir.join("record.json"), &serde_json::to_vec_pretty(&record)?)?;
    crate::report::emit_report(&record, &run_dir)?;
    Ok(record)
}

/// Reads `record.json` from a run directory and checks the stored config hash.
pub fn load_record(run_dir: &Path) -> Result<RunRecord> {
    let p = run_dir.join("record.json");
    let bytes = std::fs::read(&p).map_err(|e| LabError::io(&p, e))?;
    let record: RunRecord = serde_json::from_slice(&bytes)?;
    let cp = run_dir.join(&record.config_file);
    let cfg = std::fs::read(&cp).map_err(|e| LabError::io(&cp, e))?;
    if sha256_hex(&cfg) != record.config_hash {
        return Err(LabError::Inconsistency(format!("{} does not match the recorded hash", cp.display())));
    }
    Ok(record)
}

/// Family generation only: certificates (and optionally member fields) of every member.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyManifest {
    pub name: String,
    pub spec: Option<crate::generators::SpikeFamilySpec>,
    pub members: Vec<FamilyMemberEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyMemberEntry {
    pub member: String,
    pub index: usize,
    pub certificate: Option<MemberCertificate>,
    pub field: Option<String>,
    pub error: Option<String>,
}

pub fn generate_family(cfg: &ExperimentConfig, out: &Path, write_fields: bool) -> Result<FamilyManifest> {
    cfg.validate()?;
    let run_dir = out.join(&cfg.experiment.name);
    std::fs::create_dir_all(&run_dir).map_err(|e| LabError::io(&run_dir, e))?;
    let mut members = Vec::new();
    for i in cfg.family.member_indices() {
        let name = member_name(i);
        let entry = match setup_member(cfg, i) {
            Ok(s) => {
                let field = if write_fields {
                    let rel = format!("{name}.bin");
                    write_binary(s.metric.base(), &run_dir.join(&rel))?;
                    Some(rel)
                } else {
                    None
                };
                FamilyMemberEntry {
                    member: name,
                    index: i,
                    certificate: s.ctx.certificate,
                    field,
                    error: None,
                }
            }
            Err(e) => FamilyMemberEntry {
                member: name,
                index: i,
                certificate: None,
                field: None,
                error: Some(e.to_string()),
            },
        };
        members.push(entry);
    }
    let fm = FamilyManifest {
        name: cfg.experiment.name.clone(),
        spec: cfg.family.spike_spec(cfg.grid.dim),
        members,
    };
    write_file(&run_dir.join("family.json"), &serde_json::to_vec_pretty(&fm)?)?;
    Ok(fm)
}
