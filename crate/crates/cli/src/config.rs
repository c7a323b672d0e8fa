//! Run configuration: one TOML file per experiment, parsed strictly.

use std::path::{Path, PathBuf};

use pnfir::closedloop::{LoopOptions, ReferenceSignal};
use pnfir::plants::PlantSpec;
use pnfir::qp::SolverSettings;
use pnfir::trainer::SynthesisSpec;
use pnfir::vrft::{ProbeSpec, ReferenceSpec, VrftOptions};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Sampling interval in seconds.
    pub ts: f64,
    #[serde(default)]
    pub plant: Option<PlantSpec>,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
    /// Held-out excitation, simulated with seed `seed + 1`.
    #[serde(default)]
    pub validation: Option<ProbeSpec>,
    #[serde(default)]
    pub data: DataConfig,
    /// Present for controller synthesis; absent for plant identification.
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    #[serde(default)]
    pub vrft: VrftOptions,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, rename = "case")]
    pub cases: Vec<CaseConfig>,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Use only the first batches for training and hold out the rest.
    pub train_batches: Option<usize>,
    /// Measured open-loop data (`t, u, y` CSV) used instead of a simulated plant.
    pub files: Vec<PathBuf>,
}

/// One trained model; cases share the data unless they name their own plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub name: String,
    #[serde(default)]
    pub plant: Option<PlantSpec>,
    pub synthesis: SynthesisSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Frequency samples on `[0, pi]`; defaults to `20 H` (or 4000 without constraints).
    pub grid_points: Option<usize>,
    /// Toeplitz truncation for the eigenvalue check, at most 512.
    pub toeplitz_n: usize,
    /// Cases to check; empty means every case.
    pub cases: Vec<String>,
    /// Extra operator files checked alongside the trained cases.
    pub operators: Vec<PathBuf>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { grid_points: None, toeplitz_n: 256, cases: Vec::new(), operators: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedReference {
    pub name: String,
    pub signal: ReferenceSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Plant in the loop; defaults to the top-level plant.
    #[serde(default)]
    pub plant: Option<PlantSpec>,
    /// Case names; empty means every case.
    #[serde(default)]
    pub controllers: Vec<String>,
    #[serde(rename = "reference")]
    pub references: Vec<NamedReference>,
    pub len: usize,
    /// The boundedness check reruns every loop for `len * horizon_factor` samples.
    #[serde(default = "ten")]
    pub horizon_factor: usize,
    /// Magnitude that counts as unbounded.
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Leading samples left out of the metrics; defaults to the controller memory.
    #[serde(default)]
    pub exclude: Option<usize>,
    /// Band split of the tracking error, rad/s.
    #[serde(default = "default_crossover")]
    pub crossover: f64,
    #[serde(default)]
    pub noise: LoopOptions,
}

fn ten() -> usize {
    10
}

fn default_bound() -> f64 {
    1e6
}

fn default_crossover() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Case whose data and passivity settings are reused.
    pub case: Option<String>,
    pub m: Vec<usize>,
    pub h: Vec<usize>,
    pub repeats: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { case: None, m: vec![25, 50, 100, 200], h: vec![200, 400, 800], repeats: 3, threads: 1 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.files = cfg.data.files.iter().map(|f| base.join(f)).collect();
        cfg.verify.operators = cfg.verify.operators.iter().map(|f| base.join(f)).collect();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a nonempty file-name-safe string".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        if let Some(p) = &self.probe {
            p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.cases {
            if !names.insert(c.name.as_str()) || c.name.is_empty() || c.name.contains(['/', '\\']) {
                return bad(format!("case names must be unique and file-name-safe: `{}`", c.name));
            }
            c.synthesis.validate().map_err(|e| CliError::Config(format!("case `{}`: {e}", c.name)))?;
        }
        if let Some(s) = &self.simulate {
            if s.len == 0 || s.horizon_factor == 0 || s.references.is_empty() {
                return bad("simulate needs len > 0, horizon_factor > 0 and at least one reference".into());
            }
            for c in &s.controllers {
                if !names.contains(c.as_str()) {
                    return bad(format!("simulate names unknown case `{c}`"));
                }
            }
        }
        for c in &self.verify.cases {
            if !names.contains(c.as_str()) {
                return bad(format!("verify names unknown case `{c}`"));
            }
        }
        if let Some(c) = &self.bench.case {
            if !names.contains(c.as_str()) {
                return bad(format!("bench names unknown case `{c}`"));
            }
        }
        if self.bench.repeats == 0 || self.bench.threads == 0 {
            return bad("bench repeats and threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn case(&self, name: &str) -> Option<&CaseConfig> {
        self.cases.iter().find(|c| c.name == name)
    }

    /// All defaults written out explicitly.
    pub fn resolved(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}
