//! Key-value configuration files and simulation settings.
//!
//! The file format is one `key = value` pair per line; blank lines and lines
//! starting with `#` are ignored. `key: value` is accepted as well.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LevyMeasureSpec, MarkLaw, ModelParams};

pub const MODEL_KEYS: [&str; 8] =
    ["alpha0", "sigma1", "sigma2", "rho", "lambda", "c", "jump_rate", "jump_gamma0"];
pub const SIM_KEYS: [&str; 6] = ["n_particles", "n_paths", "dt", "horizon", "x0", "seed"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate config key `{0}`")]
    Duplicate(String),
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("config key `{key}`: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("config key `{key}`: {constraint}")]
    Invalid { key: String, constraint: String },
}

/// Raw key-value pairs, kept in key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KeyValueConfig {
    entries: BTreeMap<String, String>,
}

impl KeyValueConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let key = k.trim().to_string();
            let value = v.trim().trim_matches('"').to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(KeyValueConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| ConfigError::BadValue { key: key.to_string(), value: raw.to_string() })
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Model coefficients from the keys in [`MODEL_KEYS`]. Values are not
    /// validated here; see [`crate::model::validate_params`].
    pub fn model_params(&self) -> Result<ModelParams, ConfigError> {
        for key in MODEL_KEYS {
            self.require(key)?;
        }
        let preset = self.require("jump_gamma0")?;
        let marks = MarkLaw::parse(preset).ok_or_else(|| ConfigError::BadValue {
            key: "jump_gamma0".into(),
            value: preset.to_string(),
        })?;
        Ok(ModelParams {
            alpha0: self.parse_key("alpha0")?,
            sigma1: self.parse_key("sigma1")?,
            sigma2: self.parse_key("sigma2")?,
            rho: self.parse_key("rho")?,
            lambda: self.parse_key("lambda")?,
            c: self.parse_key("c")?,
            levy: LevyMeasureSpec { rate: self.parse_key("jump_rate")?, marks },
        })
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        for key in SIM_KEYS {
            self.require(key)?;
        }
        let start_time = match self.get("s") {
            Some(_) => self.parse_key("s")?,
            None => 0.0,
        };
        let cfg = SimConfig {
            n_particles: self.parse_key("n_particles")?,
            n_paths: self.parse_key("n_paths")?,
            dt: self.parse_key("dt")?,
            horizon: self.parse_key("horizon")?,
            x0: self.parse_key("x0")?,
            seed: self.parse_key("seed")?,
            start_time,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Monte-Carlo discretisation and sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub x0: f64,
    pub seed: u64,
    /// Clock value `s` of the initial extended state.
    #[serde(default)]
    pub start_time: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, constraint: &str| {
            Err(ConfigError::Invalid { key: key.into(), constraint: constraint.into() })
        };
        if self.n_particles < 1 {
            return invalid("n_particles", "must be >= 1");
        }
        if self.n_paths < 1 {
            return invalid("n_paths", "must be >= 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid("dt", "must be > 0");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid("horizon", "must be > 0");
        }
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return invalid("x0", "must be > 0");
        }
        if !(self.start_time >= 0.0 && self.start_time.is_finite()) {
            return invalid("s", "must be >= 0");
        }
        Ok(())
    }

    /// Number of steps needed to cover the horizon.
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil().max(1.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASELINE: &str = "\
# baseline
alpha0 = 0.02
sigma1 = 0.2
sigma2 = 0.1
rho = 0.05
lambda = 0
c = 1
jump_rate = 0
jump_gamma0 = none
n_particles = 100
n_paths: 10
dt = 0.001
horizon = 5
x0 = 1
seed = 42
";

    #[test]
    fn parses_baseline() {
        let cfg = KeyValueConfig::parse(BASELINE).unwrap();
        let p = cfg.model_params().unwrap();
        assert_eq!(p, ModelParams { sigma2: 0.1, ..ModelParams::baseline() });
        let sim = cfg.sim_config().unwrap();
        assert_eq!(sim.n_paths, 10);
        assert_eq!(sim.n_steps(), 5000);
        assert_eq!(sim.start_time, 0.0);
    }

    #[test]
    fn missing_key_is_named() {
        let text = BASELINE.replace("rho = 0.05\n", "");
        let err = KeyValueConfig::parse(&text).unwrap().model_params().unwrap_err();
        assert!(matches!(err, ConfigError::MissingKey(ref k) if k == "rho"), "{err}");
    }

    #[test]
    fn bad_preset_rejected() {
        let text = BASELINE.replace("jump_gamma0 = none", "jump_gamma0 = cauchy:1");
        let err = KeyValueConfig::parse(&text).unwrap().model_params().unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { ref key, .. } if key == "jump_gamma0"));
    }

    #[test]
    fn syntax_and_duplicates() {
        assert!(matches!(KeyValueConfig::parse("alpha0 0.1"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(KeyValueConfig::parse("a=1\na=2"), Err(ConfigError::Duplicate(_))));
    }

    #[test]
    fn sim_invariants() {
        let text = BASELINE.replace("dt = 0.001", "dt = 0");
        let err = KeyValueConfig::parse(&text).unwrap().sim_config().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "dt"));
    }
}
