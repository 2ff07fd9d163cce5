//! Run configuration: JSON validated against the bundled schema, then
//! deserialized and checked for consistency.

use crate::error::{Error, Result};
use crate::market::{ControlGrid, MarketSpec};
use crate::solver::SolverConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

/// The schema every configuration must satisfy.
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Uniform grid of `count` trade rates from `lo/T` to `hi/T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridSpec {
    pub fn build(&self, horizon: f64) -> Result<ControlGrid> {
        ControlGrid::uniform(self.lo, self.hi, self.count, horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub label: String,
    pub value: f64,
    pub tolerance_pct: f64,
}

fn d_eval_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// fresh paths for Monte Carlo evaluation
    #[serde(default = "d_eval_paths")]
    pub paths: usize,
    /// risk aversions of the frontier sweep
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// benchmark weights of the sensitivity sweep
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phis: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { paths: d_eval_paths(), gammas: Vec::new(), phis: Vec::new(), anchor_gamma: None, reference: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    #[serde(default)]
    pub description: String,
    /// values not fixed by the source setting, stated explicitly
    #[serde(default)]
    pub assumptions: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub market: MarketSpec,
    pub grid: GridSpec,
    /// per-agent grids; empty means every agent uses `grid`
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agent_grids: Vec<GridSpec>,
    pub solver: SolverConfig,
    #[serde(default)]
    pub evaluation: EvalSettings,
}

/// Check a JSON document against [`SCHEMA`].
pub fn check_schema(doc: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(SCHEMA)?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| Error::Schema(e.to_string()))?;
    let problems: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| format!("{}: {}", e.instance_path, e))
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Schema(problems.join("; ")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        check_schema(&doc)?;
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.solver.validate()?;
        if !self.agent_grids.is_empty() && self.agent_grids.len() != self.market.k() {
            return Err(Error::Config(format!(
                "{} agent grids for {} agents",
                self.agent_grids.len(),
                self.market.k()
            )));
        }
        self.grids()?;
        Ok(())
    }

    pub fn grids(&self) -> Result<Vec<ControlGrid>> {
        if self.agent_grids.is_empty() {
            let g = self.grid.build(self.market.horizon)?;
            Ok(vec![g; self.market.k()])
        } else {
            self.agent_grids.iter().map(|g| g.build(self.market.horizon)).collect()
        }
    }

    /// Solver settings with the run seed applied.
    pub fn solver_config(&self) -> SolverConfig {
        let mut s = self.solver.clone();
        s.seed = self.seed;
        s
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configuration serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
