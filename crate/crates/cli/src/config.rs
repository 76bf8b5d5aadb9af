//! Run configuration files: a profile, an optional full scenario, and
//! optional trainer and evaluation blocks whose missing fields take defaults.

use std::path::Path;

use camac_core::baselines::EvalConfig;
use camac_core::environment::{ScenarioConfig, Violation};
use camac_core::training::TrainerConfig;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 10 vehicles, 3 stations, 1 transformer.
    #[default]
    Desk,
    /// 250 vehicles, 45 stations, 12 transformers.
    Paper,
}

impl Profile {
    pub fn scenario(self) -> ScenarioConfig {
        match self {
            Profile::Desk => ScenarioConfig::desk(),
            Profile::Paper => ScenarioConfig::paper(),
        }
    }
}

/// The file as written by a user; every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    scenario: Option<ScenarioConfig>,
    trainer: Option<TrainerConfig>,
    evaluation: Option<EvalConfig>,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub scenario: ScenarioConfig,
    pub trainer: TrainerConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            scenario: profile.scenario(),
            trainer: TrainerConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut all: Vec<Violation> = self
            .scenario
            .violations()
            .into_iter()
            .map(|v| Violation { field: format!("scenario.{}", v.field), ..v })
            .collect();
        all.extend(self.trainer.violations());
        all.extend(self.evaluation.violations());
        if self.trainer.t_max > self.scenario.horizon {
            all.push(Violation {
                field: "trainer.t_max".into(),
                message: format!(
                    "trainer.t_max ({}) exceeds scenario.horizon ({})",
                    self.trainer.t_max, self.scenario.horizon
                ),
            });
        }
        all
    }

    /// Sets the scenario and trainer seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.trainer.seed = seed;
        self
    }

    /// Canonical JSON, the form hashed into manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialise")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Why a configuration was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Read(String),
    /// serde_json reports line and column.
    Parse(String),
    Invalid(Vec<Violation>),
}

impl ConfigError {
    pub fn lines(&self) -> Vec<String> {
        match self {
            ConfigError::Read(m) | ConfigError::Parse(m) => vec![m.clone()],
            ConfigError::Invalid(vs) => vs.iter().map(|v| v.to_string()).collect(),
        }
    }
}

/// Parses config text: the profile supplies any section left out.
pub fn parse_config(text: &str, default_profile: Profile) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(format!("config: {e}")))?;
    let profile = raw.profile.unwrap_or(default_profile);
    let cfg = RunConfig {
        profile,
        scenario: raw.scenario.unwrap_or_else(|| profile.scenario()),
        trainer: raw.trainer.unwrap_or_default(),
        evaluation: raw.evaluation.unwrap_or_default(),
    };
    let violations = cfg.violations();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

/// Reads and checks a config file, reporting every violation at once.
pub fn validate_config(path: &Path, default_profile: Profile) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
    parse_config(&text, default_profile)
}
