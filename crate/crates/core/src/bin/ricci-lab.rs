use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ricci_lab::config::{AuditSection, ExperimentConfig, FamilySource, LoadedConfig};
use ricci_lab::harness::{self, MemberStatus};
use ricci_lab::report;
use ricci_lab::LabError;

/// Ricci-DeTurck flow laboratory on flat tori.
#[derive(Parser)]
#[command(name = "ricci-lab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// experiment config (sectioned key = value, or .json)
    #[arg(long)]
    config: PathBuf,
    /// output root (overrides experiment.out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// points per axis (overrides grid.n)
    #[arg(long)]
    grid: Option<usize>,
    /// dimension (overrides grid.dim)
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the metric family and its certificates.
    Generate {
        #[command(flatten)]
        common: Common,
        /// also write every member metric in the binary field layout
        #[arg(long)]
        fields: bool,
    },
    /// Flow one metric (the first family member, or --metric) without audits.
    Flow {
        #[command(flatten)]
        common: Common,
        /// initial metric in the binary field layout
        #[arg(long)]
        metric: Option<PathBuf>,
    },
    /// Run the configured audits on a stored member directory.
    Audit {
        #[command(flatten)]
        common: Common,
        /// member directory holding trajectory.json and manifest.json
        member_dir: PathBuf,
    },
    /// Full pipeline: generate, flow and audit every member.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// members run concurrently (overrides experiment.jobs)
        #[arg(long)]
        jobs: Option<usize>,
        /// stop at the first member failure
        #[arg(long)]
        strict: bool,
    },
    /// Re-emit report.{md,csv,gp} for a run directory.
    Report { run_dir: PathBuf },
    /// Compare the fitted constants of two runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// accepted relative difference
        #[arg(long, default_value_t = 0.25)]
        band: f64,
        /// write compare.{md,csv} here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(LoadedConfig, PathBuf), LabError> {
    let mut loaded = ExperimentConfig::load(&common.config)?;
    if let Some(n) = common.grid {
        loaded.config.grid.n = n;
    }
    if let Some(d) = common.dim {
        loaded.config.grid.dim = d;
    }
    loaded.config.validate()?;
    let out = common.out.clone().unwrap_or_else(|| loaded.config.experiment.out.clone());
    Ok((loaded, out))
}

fn exit_for(e: &LabError) -> ExitCode {
    match e {
        LabError::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(3),
    }
}

fn verdict_name(v: &harness::Verdict) -> String {
    serde_json::to_string(v).unwrap_or_default().trim_matches('"').to_string()
}

fn print_verdicts(m: &harness::MemberManifest) {
    let status = if m.status == MemberStatus::Ok { "ok" } else { "failed" };
    println!("{}: {status}", m.member);
    if let Some(e) = &m.error {
        println!("  error: {e}");
    }
    for (k, v) in &m.verdicts {
        println!("  {k}: {}", verdict_name(v));
    }
}

fn io_err(path: &Path, e: std::io::Error) -> LabError {
    LabError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn run(cli: Cli) -> Result<ExitCode, LabError> {
    match cli.cmd {
        Cmd::Generate { common, fields } => {
            let (loaded, out) = load(&common)?;
            let fm = harness::generate_family(&loaded.config, &out, fields)?;
            let mut failed = false;
            for m in &fm.members {
                match (&m.certificate, &m.error) {
                    (_, Some(e)) => {
                        failed = true;
                        println!("{}: {e}", m.member);
                    }
                    (Some(c), None) => println!(
                        "{}: a = {:.4} rho = {:.4} c0 = {:.4e} min R = {:.4e} functional = {:.4e} (predicted {:.4e}){}",
                        m.member,
                        c.amplitude,
                        c.width,
                        c.c0_distance,
                        c.min_scalar,
                        c.functional,
                        c.predicted,
                        if c.under_resolved { " under-resolved" } else { "" }
                    ),
                    (None, None) => println!("{}: generated", m.member),
                }
            }
            println!("wrote {}", out.join(&fm.name).join("family.json").display());
            Ok(ExitCode::from(if failed { 2 } else { 0 }))
        }
        Cmd::Flow { common, metric } => {
            let (mut loaded, out) = load(&common)?;
            let cfg = &mut loaded.config;
            if let Some(m) = metric {
                cfg.family.kind = FamilySource::File;
                cfg.family.path = Some(m);
            }
            cfg.family.members = cfg.family.members.min(1);
            cfg.audit = AuditSection::default();
            cfg.validate()?;
            let run_dir = out.join(&cfg.experiment.name);
            std::fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
            let Some(&index) = cfg.family.member_indices().first() else {
                println!("family has no members");
                return Ok(ExitCode::SUCCESS);
            };
            let m = harness::run_member(cfg, index, &run_dir)?;
            print_verdicts(&m);
            if let Some(f) = &m.flow {
                println!("  steps {} t_final {:.4e}", f.steps, f.t_final);
            }
            println!("wrote {}", run_dir.join(&m.member).display());
            Ok(ExitCode::from(if m.status == MemberStatus::Ok { 0 } else { 2 }))
        }
        Cmd::Audit { common, member_dir } => {
            let (loaded, _) = load(&common)?;
            let m = harness::audit_member_dir(&member_dir, &loaded.config.audit)?;
            print_verdicts(&m);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Experiment { common, jobs, strict } => {
            let (mut loaded, out) = load(&common)?;
            if let Some(j) = jobs {
                loaded.config.experiment.jobs = j;
            }
            loaded.config.experiment.strict |= strict;
            loaded.config.validate()?;
            let rec = harness::run_experiment(&loaded, &out)?;
            for m in &rec.members {
                let vs: Vec<String> = m.verdicts.iter().map(|(k, v)| format!("{k}={}", verdict_name(v))).collect();
                let status = if m.status == MemberStatus::Ok { "ok" } else { "failed" };
                println!("{} {status} {}", m.member, vs.join(" "));
            }
            println!("wrote {}", out.join(&rec.name).join("report.md").display());
            Ok(ExitCode::from(if rec.failures() > 0 { 2 } else { 0 }))
        }
        Cmd::Report { run_dir } => {
            let rec = harness::load_record(&run_dir)?;
            report::emit_report(&rec, &run_dir)?;
            let links = report::check_report_links(&run_dir)?;
            if !links.ok() {
                return Err(LabError::Inconsistency(format!("report links: {links:?}")));
            }
            println!("wrote {}", run_dir.join("report.md").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare { a, b, band, out } => {
            let ra = harness::load_record(&a)?;
            let rb = harness::load_record(&b)?;
            let cmp = report::compare_runs(&ra, &rb, band)?;
            print!("{}", cmp.to_markdown());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
                for (name, body) in [("compare.md", cmp.to_markdown()), ("compare.csv", cmp.to_csv())] {
                    let p = dir.join(name);
                    std::fs::write(&p, body).map_err(|e| io_err(&p, e))?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
