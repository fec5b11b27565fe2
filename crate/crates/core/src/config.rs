//! Experiment configuration: sectioned `key = value` files and the equivalent JSON.
//!
//! ```ini
//! [experiment]
//! name = lp-family
//! jobs = 2
//!
//! [grid]
//! dim = 3
//! n = 32
//! side = 4.0
//!
//! [family]
//! kind = lp
//! members = 6
//!
//! [flow]
//! t_end = 0.05
//!
//! [audit.prop31]
//! radius = 1.0
//! ```
//!
//! Dotted section names nest (`audit.prop31` is `{"audit": {"prop31": ..}}`),
//! comma-separated values become arrays.

use std::path::{Path, PathBuf};

use ini::Ini;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{LabError, Result};
use crate::flow::{DiagnosticSchedule, FlowParams, Integrator};
use crate::generators::{FamilyKind, SpikeFamilySpec};
use crate::grid::{PeriodicGrid, StencilOrder};
use crate::heat::{GaussianFitConfig, KernelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default)]
    pub strict: bool,
    /// reserved; the generators are deterministic
    #[serde(default)]
    pub seed: u64,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub dim: usize,
    pub n: usize,
    pub side: f64,
    /// accuracy order of the difference stencils (2 or 4)
    pub order: u32,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            dim: 3,
            n: 32,
            side: 4.0,
            order: 4,
        }
    }
}

impl GridSection {
    pub fn build(&self) -> Result<PeriodicGrid> {
        let stencil = match self.order {
            2 => StencilOrder::Second,
            4 => StencilOrder::Fourth,
            o => return Err(LabError::Config(format!("grid.order must be 2 or 4, got {o}"))),
        };
        Ok(PeriodicGrid::cubic(self.dim, self.n, self.side)
            .map_err(|e| LabError::Config(e.to_string()))?
            .with_stencil(stencil))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilySource {
    Flat,
    Lp,
    WeightedL1,
    /// one member read from a binary metric file
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    pub kind: FamilySource,
    #[serde(default = "one")]
    pub members: usize,
    #[serde(default = "one")]
    pub first: usize,
    pub a0: Option<f64>,
    pub a_power: Option<f64>,
    pub rho0: Option<f64>,
    pub rho_power: Option<f64>,
    pub center: Option<Vec<f64>>,
    pub target: Option<f64>,
    pub delta: Option<f64>,
    pub radius: Option<f64>,
    pub scan_radii: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
}

impl FamilySection {
    /// Spike family spec with the section's overrides; `None` for flat and file sources.
    pub fn spike_spec(&self, dim: usize) -> Option<SpikeFamilySpec> {
        let base = match self.kind {
            FamilySource::Lp => SpikeFamilySpec::lp(dim, 0),
            FamilySource::WeightedL1 => SpikeFamilySpec::weighted_l1(dim, 0, self.delta.unwrap_or(0.25)),
            _ => return None,
        };
        let mut s = base;
        s.first = self.first;
        s.last = self.first + self.members - 1;
        if self.members == 0 {
            s.last = self.first - 1;
        }
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        over!(a0, a_power, rho0, rho_power, target, delta, radius);
        if let Some(c) = &self.center {
            s.center = Some(c.clone());
        }
        if let Some(r) = &self.scan_radii {
            s.scan_radii = r.clone();
        }
        Some(s)
    }

    pub fn member_indices(&self) -> Vec<usize> {
        match self.kind {
            FamilySource::File => vec![1; self.members.min(1)],
            _ => (self.first..self.first + self.members).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlueSection {
    pub inner_radius: f64,
    pub outer_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Log,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub t_end: f64,
    pub cfl_safety: f64,
    pub dt_max: f64,
    pub integrator: Integrator,
    pub monitor_every: usize,
    pub max_bilipschitz: f64,
    pub schedule: ScheduleKind,
    pub snapshots: usize,
    pub t_first: f64,
    /// track `Φ_t` at every grid point (needed for frame-exact kernel fits)
    pub track_full_grid: bool,
}

impl Default for FlowSection {
    fn default() -> Self {
        let p = FlowParams::default();
        Self {
            t_end: p.t_end,
            cfl_safety: p.cfl_safety,
            dt_max: p.dt_max,
            integrator: p.integrator,
            monitor_every: p.monitor_every,
            max_bilipschitz: p.max_bilipschitz,
            schedule: ScheduleKind::Log,
            snapshots: 12,
            t_first: 1e-3,
            track_full_grid: false,
        }
    }
}

impl FlowSection {
    pub fn params(&self) -> FlowParams {
        FlowParams {
            t_end: self.t_end,
            cfl_safety: self.cfl_safety,
            dt_max: self.dt_max,
            integrator: self.integrator,
            monitor_every: self.monitor_every,
            max_bilipschitz: self.max_bilipschitz,
        }
    }

    pub fn schedule(&self) -> Result<DiagnosticSchedule> {
        match self.schedule {
            ScheduleKind::Log => DiagnosticSchedule::log_spaced(self.t_first.min(self.t_end), self.t_end, self.snapshots),
            ScheduleKind::Linear => DiagnosticSchedule::linear(self.t_end, self.snapshots),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop31Section {
    /// defaults to the family target
    pub sigma: Option<f64>,
    pub radius: f64,
    pub rate: f64,
    /// time of the cross-member LHS table, in units of `radius^2`
    pub t_fixed: f64,
}

impl Default for Prop31Section {
    fn default() -> Self {
        Self {
            sigma: None,
            radius: 1.0,
            rate: 1e4,
            t_fixed: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop41Section {
    pub sigma: Option<f64>,
    pub delta: Option<f64>,
    /// measured from the initial metric when absent
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BallSection {
    pub r0: f64,
}

impl Default for BallSection {
    fn default() -> Self {
        Self { r0: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianSection {
    pub width: Option<f64>,
    pub cfl: Option<f64>,
    pub floor: Option<f64>,
    pub a_max: Option<f64>,
    pub frozen_exponent: Option<f64>,
    /// kernel source; defaults to the base point
    pub source: Option<Vec<f64>>,
    /// write kernel snapshots as binary fields
    pub dump: bool,
}

impl GaussianSection {
    pub fn kernel(&self) -> KernelConfig {
        let d = KernelConfig::default();
        KernelConfig {
            width: self.width,
            cfl: self.cfl.unwrap_or(d.cfl),
            dt: None,
        }
    }

    pub fn fit(&self) -> GaussianFitConfig {
        let d = GaussianFitConfig::default();
        GaussianFitConfig {
            floor: self.floor.unwrap_or(d.floor),
            frozen_exponent: self.frozen_exponent,
            a_max: self.a_max.unwrap_or(d.a_max),
            t_min: d.t_min,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    /// base point; defaults to the family center
    pub x0: Option<Vec<f64>>,
    pub prop31: Option<Prop31Section>,
    pub prop41: Option<Prop41Section>,
    pub ball_inclusion: Option<BallSection>,
    pub gaussian_bound: Option<GaussianSection>,
}

impl AuditSection {
    /// Names of the requested audits, in manifest order.
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.prop31.is_some() {
            v.push("prop31");
        }
        if self.prop41.is_some() {
            v.push("prop41");
        }
        if self.ball_inclusion.is_some() {
            v.push("ball_inclusion");
        }
        if self.gaussian_bound.is_some() {
            v.push("gaussian_bound");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub grid: GridSection,
    pub family: FamilySection,
    #[serde(default)]
    pub glue: Option<GlueSection>,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub audit: AuditSection,
}

/// A parsed config together with the bytes it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: Vec<u8>,
    /// `ini` or `json`
    pub format: &'static str,
    pub path: Option<PathBuf>,
}

fn scalar_value(s: &str) -> Value {
    let t = s.trim();
    if let Ok(i) = t.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = t.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    match t {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(t.trim_matches('"').to_string()),
    }
}

fn ini_value(s: &str) -> Value {
    if s.contains(',') {
        Value::Array(s.split(',').map(scalar_value).collect())
    } else {
        scalar_value(s)
    }
}

/// Converts sectioned `key = value` text into the JSON config tree.
pub fn ini_to_json(text: &str) -> Result<Value> {
    let ini = Ini::load_from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
    let mut root = Map::new();
    for (section, props) in ini.iter() {
        let mut node = &mut root;
        if let Some(sec) = section {
            for part in sec.split('.') {
                let entry = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()));
                node = entry
                    .as_object_mut()
                    .ok_or_else(|| LabError::Config(format!("section {sec} clashes with a key")))?;
            }
        } else if props.iter().next().is_some() {
            return Err(LabError::Config("keys outside a section".into()));
        }
        for (k, v) in props.iter() {
            if node.insert(k.to_string(), ini_value(v)).is_some() {
                return Err(LabError::Config(format!("duplicate key {k}")));
            }
        }
    }
    Ok(Value::Object(root))
}

impl ExperimentConfig {
    pub fn from_json_value(v: Value) -> Result<Self> {
        let c: Self = serde_json::from_value(v).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        Self::from_json_value(ini_to_json(text)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_json_value(v)
    }

    /// Reads a config file; `.json` files are JSON, anything else is INI.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|_| LabError::Config("config is not UTF-8".into()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let mut config = if is_json {
            Self::from_json_str(text)?
        } else {
            Self::from_ini_str(text)?
        };
        if let Some(p) = &config.family.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    config.family.path = Some(dir.join(p));
                }
            }
        }
        Ok(LoadedConfig {
            config,
            source: bytes,
            format: if is_json { "json" } else { "ini" },
            path: Some(path.to_path_buf()),
        })
    }

    /// Wraps an in-memory config; its canonical JSON serves as the stored source.
    pub fn into_loaded(self) -> Result<LoadedConfig> {
        let source = serde_json::to_vec_pretty(&self)?;
        Ok(LoadedConfig {
            config: self,
            source,
            format: "json",
            path: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(LabError::Config(m));
        if self.experiment.name.is_empty()
            || self.experiment.name.starts_with('.')
            || !self
                .experiment
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        {
            return cfg(format!("experiment name {:?} must be a plain file name", self.experiment.name));
        }
        if self.experiment.jobs == 0 {
            return cfg("jobs must be at least 1".into());
        }
        let grid = self.grid.build()?;
        let dim = self.grid.dim;
        if self.family.first == 0 {
            return cfg("family.first starts at 1".into());
        }
        match self.family.kind {
            FamilySource::File => match &self.family.path {
                Some(p) if p.exists() => {}
                Some(p) => return cfg(format!("metric file {} does not exist", p.display())),
                None => return cfg("family.kind = file needs family.path".into()),
            },
            FamilySource::Lp | FamilySource::WeightedL1 => {
                let spec = self.family.spike_spec(dim).expect("spike kinds have a spec");
                spec.validate().map_err(|e| LabError::Config(e.to_string()))?;
                if spec.radius > grid.injectivity_radius() {
                    return cfg("family.radius exceeds half the torus side".into());
                }
            }
            FamilySource::Flat => {}
        }
        if let Some(c) = &self.family.center {
            if c.len() != dim {
                return cfg("family.center has the wrong dimension".into());
            }
        }
        if let Some(g) = &self.glue {
            if !(g.inner_radius > 0.0 && g.inner_radius < g.outer_radius && g.outer_radius < grid.injectivity_radius()) {
                return cfg("glue radii need 0 < inner < outer < side/2".into());
            }
        }
        self.flow.params().validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.flow.schedule().map_err(|e| LabError::Config(e.to_string()))?;
        let a = &self.audit;
        if let Some(x) = &a.x0 {
            if x.len() != dim {
                return cfg("audit.x0 has the wrong dimension".into());
            }
        }
        let inj = grid.injectivity_radius();
        if let Some(p) = &a.prop31 {
            if !(p.radius > 0.0 && p.radius <= inj) {
                return cfg(format!("audit.prop31.radius must lie in (0, {inj}]"));
            }
            if !(p.rate >= 0.0 && p.t_fixed > 0.0) {
                return cfg("audit.prop31 needs rate >= 0 and t_fixed > 0".into());
            }
        }
        if let Some(p) = &a.prop41 {
            let delta = p.delta.or(self.family.delta).unwrap_or(0.25);
            if !(delta > 0.0 && delta < 1.0) {
                return cfg("audit.prop41.delta must lie in (0, 1)".into());
            }
            if let Some(e) = p.epsilon {
                if e.is_nan() {
                    return cfg("audit.prop41.epsilon is NaN".into());
                }
            }
        }
        if let Some(b) = &a.ball_inclusion {
            if !(b.r0 > 0.0 && b.r0 / 4.0 <= inj) {
                return cfg("audit.ball_inclusion.r0 out of range".into());
            }
        }
        if let Some(gs) = &a.gaussian_bound {
            if let Some(w) = gs.width {
                if w < 2.0 * grid.min_spacing() {
                    return cfg(format!("gaussian_bound.width must be at least 2h = {}", 2.0 * grid.min_spacing()));
                }
            }
            if let Some(s) = &gs.source {
                if s.len() != dim {
                    return cfg("gaussian_bound.source has the wrong dimension".into());
                }
            }
        }
        Ok(())
    }

    /// Spike kind of the family, if any.
    pub fn spike_kind(&self) -> Option<FamilyKind> {
        match self.family.kind {
            FamilySource::Lp => Some(FamilyKind::Lp),
            FamilySource::WeightedL1 => Some(FamilyKind::WeightedL1),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const INI: &str = "
[experiment]
name = lp-small
jobs = 2

[grid]
dim = 3
n = 16
side = 4.0

[family]
kind = lp
members = 2
center = 2.0, 2.0, 2.0

[flow]
t_end = 0.01
snapshots = 4
integrator = rk4

[audit]
x0 = 2.0, 2.0, 2.0

[audit.prop31]
radius = 1.0

[audit.ball_inclusion]
r0 = 1.0
";

    #[test]
    fn ini_and_json_agree() {
        let a = ExperimentConfig::from_ini_str(INI).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b = ExperimentConfig::from_json_str(&json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.experiment.jobs, 2);
        assert_eq!(a.flow.integrator, Integrator::Rk4);
        assert_eq!(a.family.center, Some(vec![2.0; 3]));
        assert_eq!(a.audit.names(), vec!["prop31", "ball_inclusion"]);
        a.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let bad = INI.replace("jobs = 2", "jobs = 2\nspeed = 11");
        assert!(matches!(ExperimentConfig::from_ini_str(&bad), Err(LabError::Config(_))));
        let bad = INI.replace("kind = lp", "kind = sphere");
        assert!(matches!(ExperimentConfig::from_ini_str(&bad), Err(LabError::Config(_))));
        let c = ExperimentConfig::from_ini_str(&INI.replace("radius = 1.0", "radius = 7.0")).unwrap();
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
        let c = ExperimentConfig::from_ini_str(&INI.replace("kind = lp", "kind = file\npath = /nonexistent.bin")).unwrap();
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
    }

    #[test]
    fn family_overrides_reach_the_spec() {
        let c = ExperimentConfig::from_ini_str(&INI.replace("members = 2", "members = 3\nfirst = 2\na0 = 0.5")).unwrap();
        let s = c.family.spike_spec(3).unwrap();
        assert_eq!((s.first, s.last, s.a0), (2, 4, 0.5));
        assert_eq!(c.family.member_indices(), vec![2, 3, 4]);
        let c = ExperimentConfig::from_ini_str(&INI.replace("members = 2", "members = 0")).unwrap();
        assert!(c.family.spike_spec(3).unwrap().is_empty());
        assert!(c.family.member_indices().is_empty());
    }
}
