//! The experiment config: one JSON file with a section per subsystem.
//!
//! Overrides are applied to the raw JSON before it is typed, so a flag and
//! the equivalent file entry behave identically and a misspelled key fails
//! the same way in both.

use ptrack::backend::TrackerConfig;
use ptrack::learn::LearnConfig;
use ptrack::sim::{preset, ScenarioSpec};
use ptrack_serve::ServeConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fmt;
use std::path::{Path, PathBuf};

/// A config problem: unknown key, bad value or malformed override.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub preset: String,
    /// Scenario fields replacing the preset's values.
    pub overrides: Map<String, Value>,
    /// Episodes written by `simulate`.
    pub episodes: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            preset: "long_term".into(),
            overrides: Map::new(),
            episodes: 1,
        }
    }
}

impl SimSection {
    /// The preset with overrides applied and validated. The seed field is
    /// left for the caller to set per episode.
    pub fn scenario(&self) -> Result<ScenarioSpec, ConfigError> {
        let base = preset(&self.preset).map_err(|e| ConfigError(format!("sim.preset: {e}")))?;
        let mut v = serde_json::to_value(&base).expect("scenario serializes");
        let obj = v.as_object_mut().expect("scenario is an object");
        for (k, val) in &self.overrides {
            if k == "seed" {
                return err("sim.overrides.seed: episode seeds derive from the top-level seed");
            }
            if !obj.contains_key(k) {
                return err(format!("sim.overrides: unknown scenario key `{k}`"));
            }
            obj.insert(k.clone(), val.clone());
        }
        let spec: ScenarioSpec = serde_json::from_value(v).map_err(|e| ConfigError(format!("sim.overrides: {e}")))?;
        spec.validate().map_err(|e| ConfigError(format!("sim: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QNetSection {
    /// Q-network weights used by eval, diagnose and serve, and as the
    /// starting point of train.
    pub checkpoint: Option<PathBuf>,
    /// Supervised classifier for the offline rungs of diagnose.
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out episodes use the sim scenario with this length.
    pub episodes: usize,
    pub episode_len: usize,
    /// Threshold of the online rule.
    pub tau: f64,
    pub recovery_episodes: usize,
    pub recovery_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 16,
            episode_len: 5000,
            tau: ptrack::learn::DEFAULT_TAU,
            recovery_episodes: 8,
            recovery_len: 2000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// The only seed: episodes, initialization, exploration and sampling
    /// all derive from it.
    pub seed: u64,
    pub sim: SimSection,
    pub backend: TrackerConfig,
    pub qnet: QNetSection,
    pub learn: LearnConfig,
    pub eval: EvalSection,
    pub serve: ServeConfig,
}

impl Config {
    /// Reads the file (or starts from defaults), applies `overrides` in
    /// order and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<Self> {
        let mut raw = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for (key, value) in overrides {
            set_path(&mut raw, key, value.clone())?;
        }
        Ok(Self::from_value(raw)?)
    }

    pub fn from_value(raw: Value) -> Result<Self, ConfigError> {
        for key in ["seed", "init_seed"] {
            if raw.pointer(&format!("/learn/{key}")).is_some() {
                return err(format!("learn.{key}: set the top-level seed instead"));
            }
        }
        let mut cfg: Config = serde_json::from_value(raw).map_err(|e| ConfigError(e.to_string()))?;
        cfg.learn.seed = cfg.seed;
        cfg.learn.init_seed = cfg.seed;
        cfg.sim.scenario()?;
        cfg.backend.validate().map_err(|e| ConfigError(e.to_string()))?;
        cfg.learn.validate().map_err(|e| ConfigError(e.to_string()))?;
        if cfg.serve.stride == 0 {
            return err("serve.stride must be positive");
        }
        Ok(cfg)
    }
}

/// Parses `a.b.c=value`; the value is read as JSON when it parses and as
/// a plain string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), ConfigError> {
    let Some((key, value)) = s.split_once('=') else {
        return err(format!("override `{s}` is not of the form key=value"));
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return err(format!("override `{s}` has an empty key segment"));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted path, creating intermediate objects.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return err(format!("override `{key}`: `{}` is not a section", parts[..i].join(".")));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}
