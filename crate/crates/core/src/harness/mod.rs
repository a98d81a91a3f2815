//! Experiment orchestration: configuration, scenario runs, artifacts and
//! reproducible random substreams.
//!
//! A run writes `<root>/<scenario>/summary.json`, `tables/*.csv` and
//! `digest.txt`. The root comes from `--out`, then the config's `output`,
//! then `WELLSPIN_OUT`, then `out`.

mod config;
mod scenarios;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{
    validate_config, validate_config_value, DeformationRef, Diagnostic, ExperimentConfig, LaminateFrame, LaminateParams,
    LatticeParams, LatticeSource, RigidityParams, SpinSuiteParams, Thresholds, WellSource,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "WELLSPIN_OUT";

/// Exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const GATE_FAILED: i32 = 1;
    pub const INCOMPATIBLE_MESH: i32 = 2;
    pub const ENERGY_BOUND: i32 = 3;
    pub const INTERNAL: i32 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LaminateSweep,
    SpinLemmaSuite,
    RigidityFamily,
    AntiferroSweep,
    LatticeSweep,
    WellsetAnalysis,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::LaminateSweep,
        Scenario::SpinLemmaSuite,
        Scenario::RigidityFamily,
        Scenario::AntiferroSweep,
        Scenario::LatticeSweep,
        Scenario::WellsetAnalysis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::LaminateSweep => "laminate-sweep",
            Scenario::SpinLemmaSuite => "spin-lemma-suite",
            Scenario::RigidityFamily => "rigidity-family",
            Scenario::AntiferroSweep => "antiferro-sweep",
            Scenario::LatticeSweep => "lattice-sweep",
            Scenario::WellsetAnalysis => "wellset-analysis",
        }
    }

    /// Scenarios that fit a log-log slope over `m_list`.
    pub fn needs_slopes(self) -> bool {
        matches!(self, Scenario::LaminateSweep | Scenario::AntiferroSweep | Scenario::LatticeSweep)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// FNV-1a, used to turn substream labels into ChaCha stream ids.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `label` under `seed`. Streams with different
/// labels never overlap, so adding draws in one place leaves the others alone.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

/// One pass/fail check of a run.
#[derive(Clone, Debug, Serialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Gate {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), pass, detail: detail.into() }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub force: bool,
    pub out_root: Option<PathBuf>,
    /// Directory that relative paths in the config resolve against.
    pub base_dir: PathBuf,
    /// Write artifacts to disk.
    pub write: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { force: false, out_root: None, base_dir: PathBuf::from("."), write: true }
    }
}

/// Everything a scenario produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub gates: Vec<Gate>,
    pub results: serde_json::Value,
    pub tables: Vec<(String, Vec<u8>)>,
    pub digest: Vec<String>,
    pub dir: Option<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }

    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&[u8]> {
        self.tables.iter().find(|t| t.0 == name).map(|t| t.1.as_slice())
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            exit::OK
        } else {
            exit::GATE_FAILED
        }
    }
}

/// Exit code for an error escaping a run.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::IncompatibleMesh(_) => exit::INCOMPATIBLE_MESH,
        Error::EnergyBound(_) => exit::ENERGY_BOUND,
        _ => exit::INTERNAL,
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: Scenario,
    seed: u64,
    passed: bool,
    config: &'a ExperimentConfig,
    gates: &'a [Gate],
    results: &'a serde_json::Value,
}

pub(crate) struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub opts: &'a RunOptions,
}

impl Context<'_> {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.opts.base_dir.join(path)
        }
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        substream(self.cfg.seed, label)
    }
}

fn output_root(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    if let Some(p) = &opts.out_root {
        return p.clone();
    }
    if let Some(p) = &cfg.output {
        let p = Path::new(p);
        return if p.is_absolute() { p.to_path_buf() } else { opts.base_dir.join(p) };
    }
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs `scenario` under `cfg`, writing artifacts unless disabled.
pub fn run(scenario: Scenario, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    if let Some(s) = cfg.scenario {
        if s != scenario {
            return Err(Error::Config(format!("config is for `{s}`, not `{scenario}`")));
        }
    }
    let problems = config::check(cfg, scenario, &opts.base_dir);
    if !problems.is_empty() {
        let msg: Vec<String> = problems.iter().map(|d| d.to_string()).collect();
        return Err(Error::Config(msg.join("; ")));
    }
    let ctx = Context { cfg, opts };
    let mut out = match scenario {
        Scenario::LaminateSweep => scenarios::laminate_sweep(&ctx)?,
        Scenario::SpinLemmaSuite => scenarios::spin_lemma_suite(&ctx)?,
        Scenario::RigidityFamily => scenarios::rigidity_family(&ctx)?,
        Scenario::AntiferroSweep => scenarios::antiferro_sweep(&ctx)?,
        Scenario::LatticeSweep => scenarios::lattice_sweep(&ctx)?,
        Scenario::WellsetAnalysis => scenarios::wellset_analysis(&ctx)?,
    };
    out.scenario = scenario;
    if opts.write {
        let dir = output_root(cfg, opts).join(scenario.name());
        write_artifacts(&dir, cfg, &out)?;
        out.dir = Some(dir);
    }
    Ok(out)
}

/// Runs with at most `workers` threads (all available when `None`).
pub fn run_with_workers(
    scenario: Scenario,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    workers: Option<usize>,
) -> Result<RunOutcome> {
    match workers {
        None => run(scenario, cfg, opts),
        Some(0) => Err(Error::Config("--workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Resource(e.to_string()))?;
            pool.install(|| run(scenario, cfg, opts))
        }
    }
}

fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    let tables = dir.join("tables");
    fs::create_dir_all(&tables)?;
    for (name, bytes) in &out.tables {
        fs::write(tables.join(format!("{name}.csv")), bytes)?;
    }
    let summary = Summary {
        scenario: out.scenario,
        seed: cfg.seed,
        passed: out.passed(),
        config: cfg,
        gates: &out.gates,
        results: &out.results,
    };
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    fs::write(dir.join("digest.txt"), render_digest(out))?;
    Ok(())
}

pub fn render_digest(out: &RunOutcome) -> String {
    let mut s = format!("scenario: {}\n", out.scenario);
    for line in &out.digest {
        s.push_str(line);
        s.push('\n');
    }
    s.push('\n');
    for g in &out.gates {
        s.push_str(&format!("[{}] {}: {}\n", if g.pass { "PASS" } else { "FAIL" }, g.name, g.detail));
    }
    s.push_str(&format!("overall: {}\n", if out.passed() { "PASS" } else { "FAIL" }));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4).map({
            let mut r = substream(7, "a");
            move |_| r.random()
        }).collect();
        let a2: Vec<u64> = (0..4).map({
            let mut r = substream(7, "a");
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = substream(7, "b");
            move |_| r.random()
        }).collect();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn scenario_names_roundtrip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&Error::IncompatibleMesh("x".into())), 2);
        assert_eq!(exit_code_for(&Error::EnergyBound("x".into())), 3);
        assert_eq!(exit_code_for(&Error::Domain("x".into())), 4);
    }
}
