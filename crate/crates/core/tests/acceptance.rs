//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits nonzero if any fails. Run outputs are kept
//! under the cargo target tmpdir for inspection.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ricci_lab::analysis::{cutoff_field, cutoff_gradient_audit, CutoffParams, CutoffProfile};
use ricci_lab::config::ExperimentConfig;
use ricci_lab::curvature::{conformal_scalar_oracle, scalar_curvature};
use ricci_lab::field::{sym_index, ScalarField, SymTensorField};
use ricci_lab::flow::{self, DiagnosticSchedule, FlowParams, Tracker};
use ricci_lab::grid::PeriodicGrid;
use ricci_lab::harness::{self, RunRecord};
use ricci_lab::heat::{green_function_static, KernelConfig};
use ricci_lab::metric::MetricField;
use ricci_lab::report;
use ricci_lab::store::load_trajectory;

type Check = Result<(bool, String), String>;

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn config_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_config(path: &Path, out: &Path, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<RunRecord, String> {
    let mut loaded = ExperimentConfig::load(path).map_err(|e| e.to_string())?;
    edit(&mut loaded.config);
    let _ = fs::remove_dir_all(out.join(&loaded.config.experiment.name));
    harness::run_experiment(&loaded, out).map_err(|e| e.to_string())
}

fn run_ini(text: &str, out: &Path) -> Result<RunRecord, String> {
    let cfg = ExperimentConfig::from_ini_str(text).map_err(|e| e.to_string())?;
    let _ = fs::remove_dir_all(out.join(&cfg.experiment.name));
    let loaded = cfg.into_loaded().map_err(|e| e.to_string())?;
    harness::run_experiment(&loaded, out).map_err(|e| e.to_string())
}

fn all_ok(rec: &RunRecord) -> Result<(), String> {
    match rec.members.iter().find(|m| m.error.is_some()) {
        Some(m) => Err(format!("{} failed: {}", m.member, m.error.as_deref().unwrap_or(""))),
        None => Ok(()),
    }
}

// R of e^{2u} δ with u = eps sin(2π x_0), n = 3, by hand
fn closed_form(x: f64, eps: f64) -> f64 {
    let w = 2.0 * PI;
    let u = eps * (w * x).sin();
    let du = eps * w * (w * x).cos();
    let d2u = -eps * w * w * (w * x).sin();
    (-2.0 * u).exp() * (-4.0 * d2u - 2.0 * du * du)
}

fn conformal_errors(n: usize) -> Result<(f64, f64), String> {
    let grid = PeriodicGrid::cubic(3, n, 1.0).map_err(|e| e.to_string())?;
    let u = ScalarField::from_fn(&grid, |x, o| o[0] = 0.01 * (2.0 * PI * x[0]).sin());
    let r = scalar_curvature(&MetricField::conformal(&u).map_err(|e| e.to_string())?);
    let oracle = conformal_scalar_oracle(&u, 3).map_err(|e| e.to_string())?;
    let vs_oracle = r.max_abs_diff(&oracle).map_err(|e| e.to_string())? / oracle.max_abs();
    let exact = ScalarField::from_fn(&grid, |x, o| o[0] = closed_form(x[0], 0.01));
    let vs_exact = r.max_abs_diff(&exact).map_err(|e| e.to_string())? / exact.max_abs();
    Ok((vs_oracle, vs_exact))
}

fn criterion_1() -> Check {
    let (o48, e48) = conformal_errors(48)?;
    let (_, e96) = conformal_errors(96)?;
    let ratio = e48 / e96;
    Ok((
        o48 <= 1e-3 && e48 <= 1e-3 && ratio >= 3.5,
        format!("rel err vs oracle {o48:.2e}, vs closed form {e48:.2e}, N 48->96 ratio {ratio:.2}"),
    ))
}

fn criterion_2() -> Check {
    let grid = PeriodicGrid::cubic(3, 32, 4.0).map_err(|e| e.to_string())?;
    // a constant anisotropic metric is flat too
    let g0 = MetricField::new(SymTensorField::from_fn(&grid, |_, o| {
        o[sym_index(0, 0, 3)] = 1.2;
        o[sym_index(1, 1, 3)] = 0.9;
        o[sym_index(2, 2, 3)] = 1.0;
        o[sym_index(0, 1, 3)] = 0.1;
    }))
    .map_err(|e| e.to_string())?;
    let dt = flow::cfl_limit(&g0, 0.4);
    let params = FlowParams {
        t_end: 200.0 * dt,
        dt_max: dt,
        cfl_safety: 0.4,
        monitor_every: 50,
        ..FlowParams::default()
    };
    let sched = DiagnosticSchedule::new(vec![params.t_end]).map_err(|e| e.to_string())?;
    let traj = flow::run(g0.clone(), MetricField::euclidean(&grid), &params, &sched, Tracker::empty(3))
        .map_err(|a| a.to_string())?;
    let drift = traj.last().g.base().max_abs_diff(g0.base()).map_err(|e| e.to_string())?;
    Ok((
        drift < 1e-10 && traj.steps >= 200,
        format!("sup drift {drift:.2e} after {} steps", traj.steps),
    ))
}

fn rmin_line(recs: &[&RunRecord]) -> Check {
    let mut parts = vec![];
    let mut ok = true;
    for r in recs {
        all_ok(r)?;
        let m = r.shared.rmin_monotone == Some(true);
        ok &= m;
        parts.push(format!("{} ({} members) {}", r.name, r.members.len(), if m { "monotone" } else { "NOT monotone" }));
    }
    Ok((ok, parts.join("; ")))
}

fn criterion_4(out: &Path) -> Check {
    // flat static value at x = y, t = 0.01
    let grid = PeriodicGrid::cubic(3, 48, 1.0).map_err(|e| e.to_string())?;
    let y = grid.nearest_index(&[0.5, 0.5, 0.5]);
    let kr = green_function_static(&MetricField::euclidean(&grid), y, &[0.01], &KernelConfig::default())
        .map_err(|e| e.to_string())?;
    // snapshot 0 is the initial bump at the mollifier time
    let value = kr.snapshots.last().ok_or("no kernel snapshot")?.values.value(y);
    let rel = (value - 22.45).abs() / 22.45;
    let mut mass_err = kr.max_mass_error();

    // spike flow, Gaussian fit at N = 32 and 48 with the same physical width
    let text = "
[experiment]
name = gauss-N32

[grid]
dim = 3
n = 32
side = 4.0

[family]
kind = lp
members = 1
a0 = 0.2
rho0 = 1.0

[flow]
t_end = 0.03
snapshots = 8
cfl_safety = 0.4
track_full_grid = true

[audit.gaussian_bound]
width = 0.375
";
    let a = run_ini(text, out)?;
    let b = run_ini(&text.replace("n = 32", "n = 48").replace("N32", "N48"), out)?;
    all_ok(&a)?;
    all_ok(&b)?;
    let mut cs = vec![];
    for r in [&a, &b] {
        let m = harness::read_manifest(&r.dir(out).join("member-01")).map_err(|e| e.to_string())?;
        let g = m
            .gaussian_bound
            .and_then(|e| e.report)
            .ok_or("no gaussian report")?;
        mass_err = mass_err.max(g.max_mass_error);
        cs.push(g.fit.c);
    }
    let drift = report::relative_difference(cs[0], cs[1]);
    let finite = cs.iter().all(|c| c.is_finite() && *c > 0.0);
    Ok((
        rel <= 0.02 && mass_err <= 1e-3 && finite && drift <= 0.25,
        format!(
            "G(y,y,0.01) = {value:.3} ({:.2}% off 22.45), max mass error {mass_err:.1e}, C {:.3} -> {:.3} ({:.1}%)",
            100.0 * rel,
            cs[0],
            cs[1],
            100.0 * drift
        ),
    ))
}

fn criterion_5(rec: &RunRecord) -> Check {
    all_ok(rec)?;
    let s = &rec.shared;
    let lhs: Vec<String> = rec
        .members
        .iter()
        .map(|m| m.constants.lhs_fixed.map_or("-".into(), |v| format!("{v:.3}")))
        .collect();
    Ok((
        rec.members.len() == 6 && s.prop31_shared_holds == Some(true) && s.lhs_decreasing == Some(true),
        format!(
            "C6 = {:.3e}, C7 = {:.3e}, LHS at t = {:.3} by member: {}",
            s.c6.unwrap_or(f64::NAN),
            s.c7.unwrap_or(f64::NAN),
            s.t_fixed.unwrap_or(f64::NAN),
            lhs.join(" > ")
        ),
    ))
}

fn criterion_6(rec: &RunRecord) -> Check {
    all_ok(rec)?;
    let s = &rec.shared;
    let slopes: Vec<String> = rec
        .members
        .iter()
        .map(|m| m.constants.slope.map_or("-".into(), |v| format!("{v:.3}")))
        .collect();
    let ratio = s.l_ratio.unwrap_or(f64::INFINITY);
    Ok((
        rec.members.len() == 5 && ratio <= 3.0 && s.slopes_within_band == Some(true),
        format!(
            "L in [{:.3e}, {:.3e}] ratio {ratio:.2}; slopes {} (target -0.75 +/- 0.15)",
            s.l_min.unwrap_or(f64::NAN),
            s.l_max.unwrap_or(f64::NAN),
            slopes.join(", ")
        ),
    ))
}

fn criterion_7(recs: &[&RunRecord]) -> Check {
    let mut margin = f64::INFINITY;
    let mut n = 0;
    let mut ok = true;
    for r in recs {
        all_ok(r)?;
        ok &= r.shared.ball_inclusion_holds == Some(true);
        for m in &r.members {
            n += 1;
            margin = margin.min(m.constants.ball_margin.unwrap_or(f64::NEG_INFINITY));
        }
    }
    Ok((ok && margin > 0.0, format!("{n} members, smallest margin {margin:.3e}")))
}

fn criterion_8(lp_dir: &Path) -> Check {
    let prof = CutoffProfile::default().check(10_000);
    let member = lp_dir.join("member-01");
    let manifest = harness::read_manifest(&member).map_err(|e| e.to_string())?;
    let traj = load_trajectory(&member).map_err(|e| e.to_string())?;
    let c0 = manifest
        .flow
        .as_ref()
        .and_then(|f| f.fitted.c0_dist)
        .unwrap_or(0.0);
    let p = CutoffParams::new(3, c0, 1.0);
    let mut worst: f64 = 0.0;
    for st in &traj.states {
        let phi = cutoff_field(&traj, st.t, &manifest.x0, &p).map_err(|e| e.to_string())?;
        let a = cutoff_gradient_audit(&phi, &st.g, &p).map_err(|e| e.to_string())?;
        worst = worst.max(a.worst_ratio);
    }
    Ok((
        prof.all() && worst <= 1.0,
        format!(
            "profile checks {} at {} samples (max |phi'| {:.3}); gradient ratio max {worst:.3e} over {} snapshots",
            if prof.all() { "pass" } else { "fail" },
            prof.samples,
            prof.max_slope,
            traj.states.len()
        ),
    ))
}

fn csvs(run_dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = report::member_csv_files(run_dir).map_err(|e| e.to_string())?;
    files.insert("report.csv".into());
    files
        .into_iter()
        .map(|f| fs::read(run_dir.join(&f)).map(|b| (f, b)).map_err(|e| e.to_string()))
        .collect()
}

fn criterion_9(out: &Path) -> Check {
    let edit = |name: &'static str| {
        move |c: &mut ExperimentConfig| {
            c.experiment.name = name.into();
            c.family.members = 1;
        }
    };
    let a = run_config(&config_file("lp-family.ini"), out, edit("determinism-a"))?;
    let b = run_config(&config_file("lp-family.ini"), out, edit("determinism-b"))?;
    all_ok(&a)?;
    let (ca, cb) = (csvs(&a.dir(out))?, csvs(&b.dir(out))?);
    let differing: Vec<&String> = ca.keys().filter(|k| ca.get(*k) != cb.get(*k)).collect();
    Ok((
        differing.is_empty() && ca.len() == cb.len(),
        format!("{} CSV files compared, {} differ {differing:?}", ca.len(), differing.len()),
    ))
}

fn main() {
    let out = out_root();
    fs::create_dir_all(&out).expect("acceptance output dir");
    let mut lines: BTreeMap<u32, (String, Check, f64)> = BTreeMap::new();
    let timed = |k: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let c = f();
        let secs = t.elapsed().as_secs_f64();
        eprintln!("criterion {k} done in {secs:.1} s");
        (k, (name.to_string(), c, secs))
    };
    let (k, v) = timed(1, "curvature oracle", &mut criterion_1);
    lines.insert(k, v);
    let (k, v) = timed(2, "flow stationarity", &mut criterion_2);
    lines.insert(k, v);

    let t = Instant::now();
    let lp = run_config(&config_file("lp-family.ini"), &out, |_| {});
    let lp_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let wl1 = run_config(&config_file("weighted-l1.ini"), &out, |_| {});
    let wl1_secs = t.elapsed().as_secs_f64();
    eprintln!("family runs done in {:.1} s", lp_secs + wl1_secs);
    let lp_rec = || lp.as_ref().map_err(|e| format!("lp-family run: {e}"));
    let wl1_rec = || wl1.as_ref().map_err(|e| format!("weighted-l1 run: {e}"));

    let mut rest: Vec<(u32, (String, Check, f64))> = vec![
        timed(3, "min R monotone", &mut || rmin_line(&[lp_rec()?, wl1_rec()?])),
        timed(4, "green function", &mut || criterion_4(&out)),
        timed(5, "localized energy estimate", &mut || criterion_5(lp_rec()?)),
        timed(6, "weighted-L1 barrier", &mut || criterion_6(wl1_rec()?)),
        timed(7, "ball inclusion", &mut || criterion_7(&[lp_rec()?, wl1_rec()?])),
        timed(8, "cutoff construction", &mut || criterion_8(&lp_rec()?.dir(&out))),
        timed(9, "determinism", &mut || criterion_9(&out)),
    ];
    for (k, v) in rest.drain(..) {
        lines.insert(k, v);
    }
    lines.get_mut(&5).unwrap().2 += lp_secs;
    lines.get_mut(&6).unwrap().2 += wl1_secs;

    println!();
    let mut failed = 0;
    for (k, (name, c, secs)) in &lines {
        let (pass, detail) = match c {
            Ok((p, d)) => (*p, d.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {k} ({name}, {secs:.1} s): {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("\n{} of {} criteria passed; outputs in {}", lines.len() - failed, lines.len(), out.display());
    if failed > 0 {
        std::process::exit(1);
    }
}

