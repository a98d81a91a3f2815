use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::Result;
use crate::lattice::LatticeSystemDoc;
use crate::wellalg::WellSetDoc;

/// Where a well set comes from: `"reference"`, a JSON file path, or inline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WellSource {
    Named(String),
    Inline(WellSetDoc),
}

impl Default for WellSource {
    fn default() -> Self {
        WellSource::Named("reference".into())
    }
}

/// A builtin lattice system name, a JSON file path, or inline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatticeSource {
    Named(String),
    Inline(Box<LatticeSystemDoc>),
}

pub const LATTICE_BUILTINS: [&str; 3] = ["antiferro-raw", "antiferro-remapped", "synthetic-planar"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaminateFrame {
    /// Conjugate the wells by the inverse admissible rotation, unrotated mesh.
    #[default]
    Conjugate,
    /// Rotate the mesh by the admissible rotation.
    RotateMesh,
    /// Wells and mesh as given.
    Identity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Absolute classification threshold for mesh fields (default `c0/100`).
    pub spin: Option<f64>,
    /// Absolute classification threshold for lattice sites (default `d/100`).
    pub lattice: Option<f64>,
    /// Slope tolerance (default ±0.3, ±0.2 once `m_list` reaches 128).
    pub slope_tolerance: Option<f64>,
    pub perimeter_tolerance: f64,
    /// Allowed max/min ratio for quantities expected to stay bounded in `m`.
    pub stability_factor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { spin: None, lattice: None, slope_tolerance: None, perimeter_tolerance: 0.15, stability_factor: 2.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaminateParams {
    pub frame: LaminateFrame,
    pub period: f64,
    pub fraction: f64,
    pub offset: f64,
    pub connection: usize,
    /// Perturbation amplitude at `m = 1`; scaled by `m^{-1/2}`.
    pub perturbation: f64,
    pub rotation_grid: usize,
}

impl Default for LaminateParams {
    fn default() -> Self {
        Self {
            frame: LaminateFrame::Conjugate,
            period: 1.0,
            fraction: 0.5,
            offset: 0.25,
            connection: 1,
            perturbation: 0.0113,
            rotation_grid: 1024,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpinSuiteParams {
    pub fields: usize,
    pub adversarial_m: usize,
}

impl Default for SpinSuiteParams {
    fn default() -> Self {
        Self { fields: 1000, adversarial_m: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidityParams {
    pub fields: usize,
    pub exponents: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl Default for RigidityParams {
    fn default() -> Self {
        Self { fields: 200, exponents: vec![2.0, 2.5], epsilons: vec![1e-2, 1e-3, 1e-4] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeformationRef {
    pub m: usize,
    pub path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeParams {
    pub interfaces: usize,
    /// `raw` or `remapped`, for the antiferro sweep.
    pub variant: String,
    /// Reject sweeps with `m H_m` above this.
    pub energy_constant: Option<f64>,
    pub h2_budget: usize,
    /// Ground states used for consecutive stripes of the lattice sweep.
    pub stripe_states: Vec<usize>,
    /// Deformations read from CSV instead of constructed stripes.
    pub deformations: Vec<DeformationRef>,
}

impl Default for LatticeParams {
    fn default() -> Self {
        Self {
            interfaces: 3,
            variant: "raw".into(),
            energy_constant: None,
            h2_budget: 4096,
            stripe_states: vec![0, 1],
            deformations: Vec::new(),
        }
    }
}

fn default_delta0() -> f64 {
    0.05
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub wellset: WellSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSource>,
    /// Scales to sweep; empty selects the scenario's default.
    #[serde(default)]
    pub m_list: Vec<usize>,
    #[serde(default = "default_delta0")]
    pub delta0: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub laminate: LaminateParams,
    #[serde(default)]
    pub spin_suite: SpinSuiteParams,
    #[serde(default)]
    pub rigidity: RigidityParams,
    #[serde(default)]
    pub lattice_params: LatticeParams,
}

impl ExperimentConfig {
    pub fn default_for(scenario: Scenario) -> Self {
        let mut cfg: ExperimentConfig = serde_json::from_str("{}").expect("empty config parses");
        cfg.scenario = Some(scenario);
        cfg
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    /// `m_list`, or the scenario default when empty.
    pub fn m_list_for(&self, scenario: Scenario, lattice_dim: usize) -> Vec<usize> {
        if !self.m_list.is_empty() {
            return self.m_list.clone();
        }
        match scenario {
            Scenario::LaminateSweep => vec![8, 16, 32, 64],
            Scenario::SpinLemmaSuite => vec![8, 12, 16],
            Scenario::RigidityFamily => vec![16, 32],
            Scenario::AntiferroSweep => vec![64, 256, 1024],
            Scenario::LatticeSweep if lattice_dim >= 2 => vec![8, 16, 32],
            Scenario::LatticeSweep => vec![64, 256, 1024],
            Scenario::WellsetAnalysis => Vec::new(),
        }
    }
}

/// One field-level problem in a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Schema and referential checks of a config file. Never runs numerics.
/// `scenario` overrides the config's own scenario for scenario-specific rules.
pub fn validate_config(path: &Path, scenario: Option<Scenario>) -> Vec<Diagnostic> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return vec![Diagnostic::new("<file>", format!("cannot read {}: {e}", path.display()))],
    };
    let base = path.parent().unwrap_or(Path::new("."));
    match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v) => validate_config_value(&v, scenario, base),
        Err(e) => vec![Diagnostic::new("<file>", format!("invalid JSON: {e}"))],
    }
}

pub fn validate_config_value(value: &serde_json::Value, scenario: Option<Scenario>, base: &Path) -> Vec<Diagnostic> {
    let cfg: ExperimentConfig = match serde_path_to_error::deserialize(value) {
        Ok(c) => c,
        Err(e) => {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            return vec![Diagnostic::new(&field, e.inner().to_string())];
        }
    };
    let mut out = Vec::new();
    let sc = match (scenario, cfg.scenario) {
        (Some(a), Some(b)) if a != b => {
            out.push(Diagnostic::new("scenario", format!("config is for `{b}`, run requested `{a}`")));
            Some(a)
        }
        (a, b) => a.or(b),
    };
    match sc {
        Some(s) => out.extend(check(&cfg, s, base)),
        None => out.extend(check_common(&cfg, base)),
    }
    out
}

fn exists(base: &Path, p: &str) -> bool {
    let path = Path::new(p);
    if path.is_absolute() {
        path.is_file()
    } else {
        base.join(path).is_file()
    }
}

fn check_common(cfg: &ExperimentConfig, base: &Path) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if cfg.m_list.contains(&0) {
        out.push(Diagnostic::new("m_list", "scales must be positive"));
    }
    if cfg.m_list.windows(2).any(|w| w[1] <= w[0]) {
        out.push(Diagnostic::new("m_list", "must be strictly increasing"));
    }
    if !(cfg.delta0 > 0.0 && cfg.delta0 < 1.0) {
        out.push(Diagnostic::new("delta0", format!("{} must lie in (0, 1)", cfg.delta0)));
    }
    if !(cfg.c1 > 0.0 && cfg.c1.is_finite()) {
        out.push(Diagnostic::new("c1", "must be positive and finite"));
    }
    let t = &cfg.thresholds;
    for (name, v) in [("thresholds.spin", t.spin), ("thresholds.lattice", t.lattice)] {
        if let Some(v) = v {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(Diagnostic::new(name, "must be nonnegative and finite"));
            }
        }
    }
    if let Some(v) = t.slope_tolerance {
        if !(v > 0.0) {
            out.push(Diagnostic::new("thresholds.slope_tolerance", "must be positive"));
        }
    }
    if !(t.perimeter_tolerance > 0.0) {
        out.push(Diagnostic::new("thresholds.perimeter_tolerance", "must be positive"));
    }
    if !(t.stability_factor >= 1.0) {
        out.push(Diagnostic::new("thresholds.stability_factor", "must be at least 1"));
    }
    if let WellSource::Named(name) = &cfg.wellset {
        if name != "reference" && !exists(base, name) {
            out.push(Diagnostic::new("wellset", format!("file `{name}` not found")));
        }
    }
    if let Some(LatticeSource::Named(name)) = &cfg.lattice {
        if !LATTICE_BUILTINS.contains(&name.as_str()) && !exists(base, name) {
            out.push(Diagnostic::new("lattice", format!("`{name}` is neither a builtin system nor a file")));
        }
    }
    out
}

/// Full validation of `cfg` for `scenario`.
pub(crate) fn check(cfg: &ExperimentConfig, scenario: Scenario, base: &Path) -> Vec<Diagnostic> {
    let mut out = check_common(cfg, base);
    if scenario.needs_slopes() && !cfg.m_list.is_empty() && cfg.m_list.len() < 3 {
        out.push(Diagnostic::new(
            "m_list",
            format!("`{scenario}` fits slopes and needs at least 3 scales, got {}", cfg.m_list.len()),
        ));
    }
    match scenario {
        Scenario::LaminateSweep => {
            let l = &cfg.laminate;
            if !(l.fraction > 0.0 && l.fraction <= 1.0) {
                out.push(Diagnostic::new("laminate.fraction", "must lie in (0, 1]"));
            }
            if !(l.period > 0.0 && l.period.is_finite()) {
                out.push(Diagnostic::new("laminate.period", "must be positive"));
            }
            if !l.offset.is_finite() {
                out.push(Diagnostic::new("laminate.offset", "must be finite"));
            }
            if !(l.perturbation >= 0.0 && l.perturbation.is_finite()) {
                out.push(Diagnostic::new("laminate.perturbation", "must be nonnegative"));
            }
            if l.rotation_grid < 8 {
                out.push(Diagnostic::new("laminate.rotation_grid", "must be at least 8"));
            }
            if cfg.m_list.iter().any(|&m| m < 2) {
                out.push(Diagnostic::new("m_list", "laminate meshes need m ≥ 2"));
            }
        }
        Scenario::SpinLemmaSuite => {
            if cfg.spin_suite.fields == 0 {
                out.push(Diagnostic::new("spin_suite.fields", "must be at least 1"));
            }
            if cfg.spin_suite.adversarial_m < 4 {
                out.push(Diagnostic::new("spin_suite.adversarial_m", "must be at least 4"));
            }
        }
        Scenario::RigidityFamily => {
            let r = &cfg.rigidity;
            if !cfg.m_list.is_empty() && cfg.m_list.len() < 2 {
                out.push(Diagnostic::new("m_list", "needs at least 2 scales to compare"));
            }
            if r.fields == 0 {
                out.push(Diagnostic::new("rigidity.fields", "must be at least 1"));
            }
            if r.exponents.is_empty() || r.exponents.iter().any(|p| !(*p > 1.0 && p.is_finite())) {
                out.push(Diagnostic::new("rigidity.exponents", "need at least one exponent, each > 1"));
            }
            if r.epsilons.len() < 2 || r.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                out.push(Diagnostic::new("rigidity.epsilons", "need at least two values in (0, 1)"));
            }
        }
        Scenario::AntiferroSweep | Scenario::LatticeSweep => {
            let l = &cfg.lattice_params;
            if scenario == Scenario::AntiferroSweep && !["raw", "remapped"].contains(&l.variant.as_str()) {
                out.push(Diagnostic::new("lattice_params.variant", "must be `raw` or `remapped`"));
            }
            if let Some(c) = l.energy_constant {
                if !(c > 0.0) {
                    out.push(Diagnostic::new("lattice_params.energy_constant", "must be positive"));
                }
            }
            if l.h2_budget == 0 {
                out.push(Diagnostic::new("lattice_params.h2_budget", "must be at least 1"));
            }
            if l.stripe_states.is_empty() {
                out.push(Diagnostic::new("lattice_params.stripe_states", "must not be empty"));
            }
            for (i, d) in l.deformations.iter().enumerate() {
                if !exists(base, &d.path) {
                    out.push(Diagnostic::new(
                        &format!("lattice_params.deformations[{i}].path"),
                        format!("file `{}` not found", d.path),
                    ));
                }
            }
            if l.deformations.windows(2).any(|w| w[1].m <= w[0].m) {
                out.push(Diagnostic::new("lattice_params.deformations", "scales must be strictly increasing"));
            }
            if !l.deformations.is_empty() && l.deformations.len() < 3 {
                out.push(Diagnostic::new("lattice_params.deformations", "need at least 3 scales for slopes"));
            }
        }
        Scenario::WellsetAnalysis => {}
    }
    out
}
