//! Run configuration: JSON with defaults for every absent field, unknown
//! keys rejected, and errors that name the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::planner::PlannerConfig;
use crate::trainer::{TrainConfig, ENV_DEPENDENT_FIELDS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub seed: u64,
    /// Outer iterations for `train`.
    pub iterations: usize,
    pub out: PathBuf,
    /// Iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSpec::default(),
            planner: PlannerConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            iterations: 100,
            out: PathBuf::from("out"),
            checkpoint_interval: 10,
            eval_episodes: 100,
        }
    }
}

impl RunConfig {
    /// Defaults for `env`.
    pub fn for_env(env: EnvSpec) -> Self {
        RunConfig { train: TrainConfig::for_env(&env), env, ..RunConfig::default() }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.env.validate().map_err(|e| format!("env: {e}"))?;
        self.planner.validate()?;
        self.train.validate(&self.env)?;
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        if self.eval_episodes == 0 {
            return Err("eval_episodes must be >= 1".into());
        }
        Ok(())
    }

    /// Parses `text`. Absent fields take their defaults, with
    /// environment-dependent training defaults following `env.kind`.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." || path.is_empty() {
                Error::Config(format!("invalid config: {inner}"))
            } else {
                Error::Config(format!("invalid config at `{path}`: {inner}"))
            }
        })?;
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let explicit: Vec<&str> = ENV_DEPENDENT_FIELDS
            .iter()
            .copied()
            .filter(|f| value.get("train").and_then(|t| t.get(f)).is_some())
            .collect();
        cfg.train.apply_env_defaults(&cfg.env, &explicit);
        cfg.validate().map_err(|msg| match locate_key(text, &msg) {
            Some(line) => Error::Config(format!("invalid config at line {line}: {msg}")),
            None => Error::Config(format!("invalid config: {msg}")),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Line of the key a validation message starts with, if it appears in the
/// document.
fn locate_key(text: &str, msg: &str) -> Option<usize> {
    let field = msg.split_whitespace().next()?.trim_end_matches(':');
    let key = field.rsplit('.').next()?;
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}
