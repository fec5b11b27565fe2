//! Report emission (markdown, CSV, gnuplot script) and run comparison.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::{ConstantsRow, MemberStatus, RunRecord};

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4e}")).unwrap_or_else(|| "-".into())
}

fn flag(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "yes",
        Some(false) => "no",
        None => "-",
    }
}

fn verdict_str(v: &crate::harness::Verdict) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|x| x.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn report_markdown(rec: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", rec.name);
    let _ = writeln!(s, "config `{}` sha256 `{}`\n", rec.config_file, rec.config_hash);
    if rec.members.is_empty() {
        let _ = writeln!(s, "No members.");
        return s;
    }
    let _ = writeln!(s, "## Verdicts\n");
    let mut head = vec!["member".to_string(), "status".to_string()];
    head.extend(rec.audits.iter().cloned());
    let _ = writeln!(s, "| {} |", head.join(" | "));
    let _ = writeln!(s, "|{}|", vec!["---"; head.len()].join("|"));
    for m in &rec.members {
        let mut row = vec![m.member.clone(), format!("{:?}", m.status).to_lowercase()];
        for a in &rec.audits {
            row.push(m.verdicts.get(a).map(verdict_str).unwrap_or_else(|| "-".into()));
        }
        let _ = writeln!(s, "| {} |", row.join(" | "));
    }
    let _ = writeln!(s, "\n## Fitted constants\n");
    let _ = writeln!(s, "| member | {} |", ConstantsRow::NAMES.join(" | "));
    let _ = writeln!(s, "|---|{}|", vec!["---"; ConstantsRow::NAMES.len()].join("|"));
    for m in &rec.members {
        let vals: Vec<String> = m.constants.values().iter().map(|v| fmt(*v)).collect();
        let _ = writeln!(s, "| {} | {} |", m.member, vals.join(" | "));
    }
    let sh = &rec.shared;
    let _ = writeln!(s, "\n## Across members\n");
    let _ = writeln!(s, "- shared C6 = {}, C7 = {}, estimate holds for every member: {}", fmt(sh.c6), fmt(sh.c7), flag(sh.prop31_shared_holds));
    let _ = writeln!(s, "- LHS at t = {} decreasing in the member index: {}", fmt(sh.t_fixed), flag(sh.lhs_decreasing));
    let _ = writeln!(s, "- barrier L in [{}, {}], ratio {}; slopes within band: {}", fmt(sh.l_min), fmt(sh.l_max), fmt(sh.l_ratio), flag(sh.slopes_within_band));
    let _ = writeln!(s, "- min R nondecreasing (up to tol_FD): {}", flag(sh.rmin_monotone));
    let _ = writeln!(s, "- ball inclusion: {}", flag(sh.ball_inclusion_holds));
    let _ = writeln!(s, "- largest Gaussian-bound C: {}", fmt(sh.c_gauss_max));
    let failed: Vec<_> = rec.members.iter().filter(|m| m.status == MemberStatus::Failed).collect();
    if !failed.is_empty() {
        let _ = writeln!(s, "\n## Failures\n");
        for m in failed {
            let _ = writeln!(s, "- {}: {}", m.member, m.error.as_deref().unwrap_or("unknown"));
        }
    }
    s
}

pub fn report_csv(rec: &RunRecord) -> String {
    let mut s = String::from("member,index,status");
    for n in ConstantsRow::NAMES {
        s.push(',');
        s.push_str(n);
    }
    for a in &rec.audits {
        s.push(',');
        s.push_str(a);
    }
    s.push('\n');
    for m in &rec.members {
        let _ = write!(s, "{},{},{}", m.member, m.index, format!("{:?}", m.status).to_lowercase());
        for v in m.constants.values() {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v:.10e}");
            }
        }
        for a in &rec.audits {
            s.push(',');
            s.push_str(&m.verdicts.get(a).map(verdict_str).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

/// Member CSV files present in a run directory (relative paths, sorted).
pub fn member_csv_files(run_dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let rd = std::fs::read_dir(run_dir).map_err(|e| LabError::io(run_dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| LabError::io(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with('.') || !entry.path().is_dir() {
            continue;
        }
        let sub = std::fs::read_dir(entry.path()).map_err(|e| LabError::io(entry.path(), e))?;
        for f in sub {
            let f = f.map_err(|e| LabError::io(entry.path(), e))?;
            let fname = f.file_name().to_string_lossy().to_string();
            if fname.ends_with(".csv") {
                out.insert(format!("{name}/{fname}"));
            }
        }
    }
    Ok(out)
}

fn plot_block(s: &mut String, title: &str, out: &str, logscale: &str, xl: &str, yl: &str, curves: &[(String, String, String)]) {
    if curves.is_empty() {
        return;
    }
    let _ = writeln!(s, "\nset output '{out}'");
    let _ = writeln!(s, "set title '{title}'");
    let _ = writeln!(s, "unset logscale");
    if !logscale.is_empty() {
        let _ = writeln!(s, "set logscale {logscale}");
    }
    let _ = writeln!(s, "set xlabel '{xl}'\nset ylabel '{yl}'");
    let parts: Vec<String> = curves
        .iter()
        .map(|(f, using, t)| format!("'{f}' using {using} with linespoints title '{t}'"))
        .collect();
    let _ = writeln!(s, "plot {}", parts.join(", \\\n     "));
}

/// Gnuplot script over every member CSV in the run directory.
pub fn report_gnuplot(run_dir: &Path) -> Result<String> {
    let files = member_csv_files(run_dir)?;
    let mut s = String::from("set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n");
    let pick = |suffix: &str| -> Vec<String> { files.iter().filter(|f| f.ends_with(suffix)).cloned().collect() };
    let member = |f: &str| f.split('/').next().unwrap_or("").to_string();
    let mut curves = Vec::new();
    let mut energy = Vec::new();
    for f in pick("/series.csv") {
        curves.push((f.clone(), "1:2".to_string(), member(&f)));
        let header = std::fs::read_to_string(run_dir.join(&f)).map_err(|e| LabError::io(run_dir.join(&f), e))?;
        if header.lines().next().is_some_and(|h| h.ends_with(",energy")) {
            energy.push((f.clone(), "1:10".to_string(), member(&f)));
        }
    }
    plot_block(&mut s, "R_min at snapshots", "rmin.png", "", "t", "R_min", &curves);
    plot_block(&mut s, "energy E(t)", "energy.png", "", "t", "E", &energy);
    let steps: Vec<_> = pick("/steps.csv").into_iter().map(|f| (f.clone(), "2:4".to_string(), member(&f))).collect();
    plot_block(&mut s, "R_min per step", "rmin_steps.png", "", "t", "R_min", &steps);
    let p31: Vec<_> = pick("/prop31.csv").into_iter().map(|f| (f.clone(), "1:2".to_string(), member(&f))).collect();
    plot_block(&mut s, "localized L^{n/2} deficit", "prop31.png", "", "t", "LHS", &p31);
    let bar: Vec<_> = pick("/barrier.csv").into_iter().map(|f| (f.clone(), "1:2".to_string(), member(&f))).collect();
    plot_block(&mut s, "barrier profile max (R - sigma)_-", "barrier.png", "xy", "t", "max negative part", &bar);
    let gau: Vec<_> = pick("/gaussian.csv").into_iter().map(|f| (f.clone(), "2:5".to_string(), member(&f))).collect();
    plot_block(&mut s, "Gaussian-bound constant per snapshot", "gaussian.png", "", "kernel time", "C", &gau);
    Ok(s)
}

/// Writes `report.md`, `report.csv`, `report.gp` into the run directory.
pub fn emit_report(rec: &RunRecord, run_dir: &Path) -> Result<()> {
    let w = |name: &str, body: String| {
        let p = run_dir.join(name);
        std::fs::write(&p, body).map_err(|e| LabError::io(&p, e))
    };
    w("report.md", report_markdown(rec))?;
    w("report.csv", report_csv(rec))?;
    w("report.gp", report_gnuplot(run_dir)?)
}

/// CSV paths quoted in a gnuplot script.
pub fn script_references(script: &str) -> BTreeSet<String> {
    script
        .split('\'')
        .skip(1)
        .step_by(2)
        .filter(|s| s.ends_with(".csv"))
        .map(String::from)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkCheck {
    pub missing: Vec<String>,
    pub unreferenced: Vec<String>,
}

impl LinkCheck {
    pub fn ok(&self) -> bool {
        self.missing.is_empty() && self.unreferenced.is_empty()
    }
}

/// Compares the CSV references of `report.gp` with the member CSVs on disk.
pub fn check_report_links(run_dir: &Path) -> Result<LinkCheck> {
    let p = run_dir.join("report.gp");
    let script = std::fs::read_to_string(&p).map_err(|e| LabError::io(&p, e))?;
    let refs = script_references(&script);
    let present = member_csv_files(run_dir)?;
    Ok(LinkCheck {
        missing: refs.difference(&present).cloned().collect(),
        unreferenced: present.difference(&refs).cloned().collect(),
    })
}

/// Constants entering the refinement verdict.
pub const REFINED_CONSTANTS: [&str; 4] = ["c6", "c7", "l_barrier", "c_gauss"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub member: String,
    pub constant: String,
    pub a: f64,
    pub b: f64,
    pub rel_diff: f64,
    pub within_band: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub band: f64,
    pub rows: Vec<ComparisonRow>,
    /// every refined constant within the band
    pub stable: bool,
}

pub fn relative_difference(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Per-constant relative differences between two runs of the same experiment.
pub fn compare_runs(a: &RunRecord, b: &RunRecord, band: f64) -> Result<Comparison> {
    if a.name != b.name {
        return Err(LabError::arg(format!("runs of different experiments: {} vs {}", a.name, b.name)));
    }
    if a.audits != b.audits {
        return Err(LabError::arg("runs list different audits"));
    }
    let mut rows = Vec::new();
    for ma in &a.members {
        let Some(mb) = b.members.iter().find(|m| m.index == ma.index) else {
            continue;
        };
        for ((name, va), vb) in ConstantsRow::NAMES.iter().zip(ma.constants.values()).zip(mb.constants.values()) {
            if let (Some(x), Some(y)) = (va, vb) {
                let rel = relative_difference(x, y);
                rows.push(ComparisonRow {
                    member: ma.member.clone(),
                    constant: name.to_string(),
                    a: x,
                    b: y,
                    rel_diff: rel,
                    within_band: rel <= band,
                });
            }
        }
    }
    let stable = rows
        .iter()
        .filter(|r| REFINED_CONSTANTS.contains(&r.constant.as_str()))
        .all(|r| r.within_band);
    Ok(Comparison {
        name: a.name.clone(),
        band,
        rows,
        stable,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("member,constant,a,b,rel_diff,within_band\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.10e},{:.10e},{:.10e},{}", r.member, r.constant, r.a, r.b, r.rel_diff, r.within_band);
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("# compare {}\n\nband {:.3}, refinement stable: {}\n\n", self.name, self.band, self.stable);
        s.push_str("| member | constant | a | b | rel diff |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {:.4e} | {:.4e} | {:.3} |", r.member, r.constant, r.a, r.b, r.rel_diff);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_are_parsed_from_quotes() {
        let r = script_references("plot 'a/series.csv' using 1:2, 'b/x.csv' using 1:3\nset output 'x.png'");
        assert_eq!(r.into_iter().collect::<Vec<_>>(), vec!["a/series.csv", "b/x.csv"]);
    }

    #[test]
    fn relative_difference_handles_zeros() {
        assert_eq!(relative_difference(0.0, 0.0), 0.0);
        assert_eq!(relative_difference(1.0, 0.0), 1.0);
        assert!((relative_difference(1.0, 1.25) - 0.2).abs() < 1e-15);
    }
}
