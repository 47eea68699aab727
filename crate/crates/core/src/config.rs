//! Experiment configuration file.
//!
//! A TOML document with four sections: `[platform]`, `[policy]` (with
//! `provision`, `dispatch`, `data` and `resilience` subtables), `[workload]`
//! and `[run]`. See `configs/annotated.toml` for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamgr::DataPolicy;
use crate::dispatch::DispatchPolicy;
use crate::engine::{Engine, SimConfig};
use crate::platform::PlatformSpec;
use crate::provision::{ProvisionMode, ProvisionPolicy};
use crate::resilience::ResiliencePolicy;
use crate::workloads::{GeneratedWorkload, WorkloadSpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default)]
    pub provision: ProvisionPolicy,
    #[serde(default)]
    pub dispatch: DispatchPolicy,
    #[serde(default)]
    pub data: DataPolicy,
    #[serde(default)]
    pub resilience: ResiliencePolicy,
}

fn zero_seed() -> Vec<u64> {
    vec![0]
}
fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunSection {
    /// One simulation per seed.
    #[serde(default = "zero_seed")]
    pub seeds: Vec<u64>,
    /// Fixes the generated workload across seeds. Unset: each run generates
    /// its workload from its own seed.
    #[serde(default)]
    pub workload_seed: Option<u64>,
    #[serde(default)]
    pub trace: bool,
    /// Relative to the working directory; `MTCSIM_OUT_DIR` overrides it.
    #[serde(default = "out_dir")]
    pub output_dir: PathBuf,
    /// Row label and output file stem. Defaults to the config file stem.
    #[serde(default)]
    pub label: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: zero_seed(), workload_seed: None, trace: false, output_dir: out_dir(), label: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub platform: PlatformSpec,
    #[serde(default)]
    pub policy: PolicySection,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(m) => write!(f, "validation error: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Simulation settings for one seed, with the workload's own kill cap
    /// and retry limit merged in. Static mode without `static-nodes` takes
    /// the whole machine.
    pub fn sim_config(&self, seed: u64, w: &GeneratedWorkload) -> SimConfig {
        let mut resilience = self.policy.resilience.clone();
        if resilience.kill_cap_sec.is_none() {
            resilience.kill_cap_sec = w.kill_cap_sec;
        }
        if let Some(r) = w.max_retries {
            resilience.max_retries = r;
        }
        let mut provision = self.policy.provision.clone();
        if provision.mode == ProvisionMode::Static && provision.static_nodes.is_none() {
            provision.static_nodes = Some(self.platform.node_count);
        }
        SimConfig {
            platform: self.platform.clone(),
            provision,
            dispatch: self.policy.dispatch.clone(),
            data: self.policy.data.clone(),
            resilience,
            seed,
        }
    }

    /// The seed the workload generator uses for run `seed`.
    pub fn workload_seed_for(&self, seed: u64) -> u64 {
        self.run.workload_seed.unwrap_or(seed)
    }

    /// Checks every module-level invariant without simulating. Builds each
    /// distinct workload once so file references and graph shape are
    /// checked too.
    pub fn validate(&self, base: &Path) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.run.seeds {
            if !seen.insert(s) {
                return Err(ConfigError::Invalid(format!("seed {s} listed twice")));
            }
        }
        let mut built = std::collections::BTreeSet::new();
        for &s in &self.run.seeds {
            let ws = self.workload_seed_for(s);
            if !built.insert(ws) {
                continue;
            }
            let w = self.workload.generate(ws, base).map_err(|e| invalid(&e))?;
            Engine::new(self.sim_config(s, &w), w.graph).map_err(|e| invalid(&e))?;
        }
        Ok(())
    }
}

/// Reads and parses a config file. Returns the config and the directory
/// relative workload paths resolve against.
pub fn load(path: &Path) -> Result<(ExperimentConfig, PathBuf), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[platform]
node-count = 4
block-granularity = 1
local-storage-bytes = 1000
gfs-bandwidth-bytes-per-sec = 1e9
node-link-bandwidth-bytes-per-sec = 1e9

[workload]
archetype = "sweep"
runtimes-sec = [100.0, 100.0, 100.0, 400.0]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.run.seeds, vec![0]);
        assert!(!c.run.trace);
        assert_eq!(c.policy.resilience.max_retries, 3);
        c.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let text = format!("{MINIMAL}\n[run]\nseedz = [1]\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.platform.block_granularity = 3;
        assert!(matches!(c.validate(Path::new(".")), Err(ConfigError::Invalid(_))));

        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.run.seeds = vec![1, 1];
        assert!(c.validate(Path::new(".")).is_err());

        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.workload = WorkloadSpec::File { path: "missing.wl".into() };
        assert!(matches!(c.validate(Path::new(".")), Err(ConfigError::Invalid(_))));
    }
}
