use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ricci_lab::config::ExperimentConfig;
use ricci_lab::harness::{self, MemberStatus, Verdict};
use ricci_lab::report;
use ricci_lab::store::{load_trajectory, save_trajectory};
use ricci_lab::LabError;

const FLAT: &str = "
[experiment]
name = flat

[grid]
dim = 3
n = 12
side = 3.0

[family]
kind = flat

[flow]
t_end = 0.01
snapshots = 4

[audit.prop31]
radius = 0.75

[audit.prop41]

[audit.ball_inclusion]
r0 = 0.75

[audit.gaussian_bound]
width = 0.6
";

const SPIKE: &str = "
[experiment]
name = spike
jobs = 2

[grid]
dim = 3
n = 16
side = 4.0

[family]
kind = lp
members = 2
rho0 = 1.2

[flow]
t_end = 0.005
snapshots = 4
cfl_safety = 0.4

[audit.prop31]

[audit.ball_inclusion]
";

fn run(text: &str, out: &Path) -> harness::RunRecord {
    let loaded = ExperimentConfig::from_ini_str(text).unwrap().into_loaded().unwrap();
    harness::run_experiment(&loaded, out).unwrap()
}

fn csv_contents(run_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    report::member_csv_files(run_dir)
        .unwrap()
        .into_iter()
        .map(|f| {
            let body = fs::read(run_dir.join(&f)).unwrap();
            (f, body)
        })
        .chain(std::iter::once(("report.csv".to_string(), fs::read(run_dir.join("report.csv")).unwrap())))
        .collect()
}

#[test]
fn flat_member_has_zero_constants() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(FLAT, dir.path());
    assert_eq!(rec.members.len(), 1);
    let m = &rec.members[0];
    assert_eq!(m.status, MemberStatus::Ok, "{:?}", m.error);
    let c = &m.constants;
    for v in [c.c5, c.c6, c.c7, c.l_barrier, c.c_disp, c.a_rm].into_iter().flatten() {
        assert_eq!(v, 0.0);
    }
    assert!(m.verdicts.values().all(|v| *v == Verdict::Pass), "{:?}", m.verdicts);
    // the heat kernel of the flat torus is a Gaussian: C is finite and positive
    let cg = c.c_gauss.unwrap();
    assert!(cg.is_finite() && cg > 0.0);
    assert!(report::check_report_links(&rec.dir(dir.path())).unwrap().ok());
}

#[test]
fn empty_family_reports_no_members() {
    let dir = tempfile::tempdir().unwrap();
    let text = SPIKE.replace("members = 2", "members = 0");
    let rec = run(&text, dir.path());
    assert!(rec.members.is_empty());
    assert_eq!(rec.failures(), 0);
    let md = fs::read_to_string(rec.dir(dir.path()).join("report.md")).unwrap();
    assert!(md.contains("No members."));
}

#[test]
fn repeated_runs_are_byte_identical_and_compare_clean() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(SPIKE, a.path());
    let rb = run(SPIKE, b.path());
    assert_eq!(ra.members.len(), 2);
    let (ca, cb) = (csv_contents(&ra.dir(a.path())), csv_contents(&rb.dir(b.path())));
    assert!(ca.len() > 4);
    assert_eq!(ca, cb);
    let cmp = report::compare_runs(&ra, &rb, 0.25).unwrap();
    assert!(cmp.stable);
    for row in &cmp.rows {
        assert_eq!(row.rel_diff, 0.0, "{} {}", row.member, row.constant);
    }
}

#[test]
fn audit_from_stored_trajectory_reproduces_tables() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(SPIKE, dir.path());
    let member = rec.dir(dir.path()).join("member-01");
    let before = fs::read(member.join("prop31.csv")).unwrap();
    let series = fs::read(member.join("series.csv")).unwrap();
    let cfg = ExperimentConfig::from_ini_str(SPIKE).unwrap();
    let m = harness::audit_member_dir(&member, &cfg.audit).unwrap();
    assert_eq!(m.status, MemberStatus::Ok);
    assert_eq!(fs::read(member.join("prop31.csv")).unwrap(), before);
    assert_eq!(fs::read(member.join("series.csv")).unwrap(), series);
}

#[test]
fn trajectory_store_roundtrip_keeps_fields() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(SPIKE, dir.path());
    let member = rec.dir(dir.path()).join("member-02");
    let traj = load_trajectory(&member).unwrap();
    let copy = dir.path().join("copy");
    save_trajectory(&traj, &copy).unwrap();
    let back = load_trajectory(&copy).unwrap();
    assert_eq!(back.times(), traj.times());
    for (s, t) in traj.states.iter().zip(&back.states) {
        assert_eq!(s.g.base().data(), t.g.base().data());
        assert_eq!(s.scalar.data(), t.scalar.data());
        assert_eq!(s.tracker.displacements(), t.tracker.displacements());
    }
}

#[test]
fn tampered_config_is_rejected_on_reload() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(FLAT, dir.path());
    let rd = rec.dir(dir.path());
    assert!(harness::load_record(&rd).is_ok());
    fs::write(rd.join(&rec.config_file), b"{}").unwrap();
    assert!(harness::load_record(&rd).is_err());
}

#[test]
fn config_errors_are_reported_as_such() {
    let bad = [
        "[grid]\nbogus = 1\n",
        "[experiment]\nname = x\n[family]\nkind = nope\n",
        "[experiment]\nname = x\n[grid]\nn = seven\n",
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::from_ini_str(text), Err(LabError::Config(_))), "{text}");
    }
    let mut cfg = ExperimentConfig::from_ini_str(FLAT).unwrap();
    cfg.flow.t_end = -1.0;
    assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
    let mut cfg = ExperimentConfig::from_ini_str(FLAT).unwrap();
    cfg.experiment.name = "../escape".into();
    assert!(matches!(cfg.validate(), Err(LabError::Config(_))));
}

#[test]
fn ini_and_json_configs_agree() {
    let ini = ExperimentConfig::from_ini_str(SPIKE).unwrap();
    let json = serde_json::to_string(&ini).unwrap();
    assert_eq!(ExperimentConfig::from_json_str(&json).unwrap(), ini);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        let loaded = ExperimentConfig::load(&p).unwrap();
        loaded.config.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 4);
}
