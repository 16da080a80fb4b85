//! TOML experiment configuration.
//!
//! The `[env]` and `[planner]` tables are overlays: they are merged on top of
//! the scenario defaults, so a file only lists the fields it changes.

use std::path::{Path, PathBuf};

use ctrail_core::data::EgoSelection;
use ctrail_core::env::EnvConfig;
use ctrail_core::episode::{Ablation, LoopConfig};
use ctrail_core::experiments::{FailureRules, TrustDynamicsConfig};
use ctrail_core::oracle::MockConfig;
use ctrail_core::ScenarioKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid TOML: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Run,
    Replay,
    TrustDynamics,
    Ablate,
    Report,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Run => "run",
            Mode::Replay => "replay",
            Mode::TrustDynamics => "trust-dynamics",
            Mode::Ablate => "ablate",
            Mode::Report => "report",
        }
    }
}

/// Settings of an OpenAI-compatible chat endpoint. Unset fields fall back
/// to `CTRAIL_API_BASE` and `CTRAIL_MODEL`; the key is only read from
/// `CTRAIL_API_KEY`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveSettings {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for LiveSettings {
    fn default() -> Self {
        Self {
            base_url: None,
            model: None,
            temperature: 0.7,
            max_tokens: 4096,
            timeout_secs: 10,
            retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OracleSettings {
    Mock(MockConfig),
    Live(LiveSettings),
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings::Mock(MockConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub scenario: ScenarioKind,
    /// Trajectory CSV for replay mode.
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_raw_hz")]
    pub raw_hz: u32,
    #[serde(default)]
    pub ego_selection: EgoSelection,
    pub seeds: Vec<u64>,
    /// Episodes per seed. In replay mode, at most this many segments per seed.
    #[serde(default = "default_episode_count")]
    pub episode_count: u64,
    #[serde(default)]
    pub ablation: Ablation,
    /// Variants compared in ablate mode; empty means all four.
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    #[serde(default)]
    pub oracle: OracleSettings,
    pub output: PathBuf,
    /// Worker threads; unset uses every core.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub trust_dynamics: TrustDynamicsConfig,
    #[serde(default)]
    pub failure: FailureRules,
    #[serde(default)]
    pub env: toml::Table,
    #[serde(default)]
    pub planner: toml::Table,
}

fn default_raw_hz() -> u32 {
    25
}

fn default_episode_count() -> u64 {
    20
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(dataset) = &cfg.dataset {
            if dataset.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.dataset = Some(base.join(dataset));
            }
        }
        Ok(cfg)
    }

    /// Parses a document and applies `key.path=value` overrides first.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.mode == Mode::Report {
            return Ok(());
        }
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty");
        }
        if self.episode_count == 0 {
            return invalid("episode_count must be at least 1");
        }
        if self.mode == Mode::Replay && self.dataset.is_none() {
            return invalid("replay mode needs a dataset path");
        }
        if self.raw_hz == 0 {
            return invalid("raw_hz must be at least 1");
        }
        if self.workers == Some(0) {
            return invalid("workers must be at least 1");
        }
        if let OracleSettings::Mock(m) = &self.oracle {
            let rates = [m.relation_error_rate, m.format_error_rate, m.alias_rate];
            if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return invalid("oracle error rates must lie in [0, 1]");
            }
        }
        self.env_config()?
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let lc = self.loop_config()?;
        lc.search.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        lc.trust.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Scenario defaults with the `[env]` overlay applied.
    pub fn env_config(&self) -> Result<EnvConfig, ConfigError> {
        let kind = if self.mode == Mode::Replay {
            ScenarioKind::Replay
        } else {
            self.scenario
        };
        overlay(&EnvConfig::for_scenario(kind), &self.env)
    }

    /// Loop defaults with the `[planner]` overlay and the selected ablation.
    pub fn loop_config(&self) -> Result<LoopConfig, ConfigError> {
        let mut cfg: LoopConfig = overlay(&LoopConfig::default(), &self.planner)?;
        cfg.ablation = self.ablation;
        Ok(cfg)
    }

    pub fn ablation_variants(&self) -> Vec<Ablation> {
        if self.ablations.is_empty() {
            Ablation::ALL.to_vec()
        } else {
            self.ablations.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

/// Merges `table` over `base`. Keys that do not survive the round trip
/// through `T` are unknown and rejected.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, table: &toml::Table) -> Result<T, ConfigError> {
    let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
    let mut value = toml::Value::try_from(base).map_err(|e| invalid(&e))?;
    let mut added = Vec::new();
    merge(&mut value, &toml::Value::Table(table.clone()), &mut Vec::new(), &mut added);
    let out: T = value.try_into().map_err(|e: toml::de::Error| invalid(&e))?;
    let back = toml::Value::try_from(&out).map_err(|e| invalid(&e))?;
    for path in added {
        let mut cur = Some(&back);
        for k in &path {
            cur = cur.and_then(|v| v.get(k.as_str()));
        }
        if cur.is_none() {
            return Err(ConfigError::Invalid(format!("unknown key `{}`", path.join("."))));
        }
    }
    Ok(out)
}

fn merge(base: &mut toml::Value, top: &toml::Value, path: &mut Vec<String>, added: &mut Vec<Vec<String>>) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                path.push(k.clone());
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, path, added),
                    None => {
                        added.push(path.clone());
                        b.insert(k.clone(), v.clone());
                    }
                }
                path.pop();
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Applies `a.b.c=value`; the value is parsed as TOML and taken as a bare
/// string when that fails.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(spec.into()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().ok_or_else(|| ConfigError::Override(spec.into()))?;
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.into()))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
mode = "run"
scenario = "roundabout"
seeds = [1, 2]
output = "out"

[oracle]
kind = "mock"
relation_error_rate = 0.3

[env]
vehicle_density = 1.5

[planner.search]
k = 20
"#;

    #[test]
    fn overlays_keep_scenario_defaults() {
        let cfg = ExperimentConfig::parse(BASE, &[]).unwrap();
        let env = cfg.env_config().unwrap();
        assert_eq!(env.lane_count, 2);
        assert_eq!(env.vehicle_density, 1.5);
        assert_eq!(env.scenario_kind, ScenarioKind::Roundabout);
        let lc = cfg.loop_config().unwrap();
        assert_eq!(lc.search.k, 20);
        assert_eq!(lc.search.depth_cap, 10);
        match cfg.oracle {
            OracleSettings::Mock(m) => assert_eq!(m.relation_error_rate, 0.3),
            OracleSettings::Live(_) => panic!("expected mock"),
        }
    }

    #[test]
    fn overrides_apply_before_validation() {
        let cfg = ExperimentConfig::parse(BASE, &["planner.search.k=7".into(), "ablation=no-trust".into()]).unwrap();
        assert_eq!(cfg.loop_config().unwrap().search.k, 7);
        assert_eq!(cfg.loop_config().unwrap().ablation, Ablation::NoTrust);
        assert!(ExperimentConfig::parse(BASE, &["seeds=[]".into()]).is_err());
        assert!(ExperimentConfig::parse(BASE, &["nonsense".into()]).is_err());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(ExperimentConfig::parse(&format!("{BASE}\nbogus = 1"), &[]).is_err());
        assert!(ExperimentConfig::parse(BASE, &["env.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::parse(BASE, &["planner.force_trust=0.0".into()]).is_ok());
        assert!(ExperimentConfig::parse(BASE, &["env.lane_count=0".into()]).is_err());
        assert!(ExperimentConfig::parse(BASE, &["mode=replay".into()]).is_err());
        assert!(ExperimentConfig::parse(BASE, &["ablation=sideways".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::parse(BASE, &[]).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }
}
