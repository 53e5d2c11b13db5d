//! Consolidated TOML run configuration.
//!
//! Every section is optional and falls back to the library defaults; unknown
//! keys anywhere in the document are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EpisodeConfig;
use crate::error::ConfigError;
use crate::harness::EvalConfig;
use crate::model::{ModelDims, PretrainConfig};
use crate::ttt::TttConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Expert rollouts per checkpoint.
    pub num_demos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { num_demos: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub episodes: usize,
    /// Episode length used for timing.
    pub max_steps: usize,
    /// Run every timing episode to `max_steps` regardless of the goal.
    pub disable_success: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            max_steps: 200,
            disable_success: true,
        }
    }
}

impl BenchConfig {
    /// Environment used for timing runs.
    pub fn env(&self, base: &EpisodeConfig) -> EpisodeConfig {
        EpisodeConfig {
            max_steps: self.max_steps,
            success_radius: if self.disable_success {
                f64::MIN_POSITIVE
            } else {
                base.success_radius
            },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Defaults to `checkpoint.json` inside `out_dir`.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it replaces the dataset, pretraining and
    /// evaluation seeds.
    pub seed: Option<u64>,
    pub env: EpisodeConfig,
    pub model: ModelDims,
    pub ttt: TttConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::invalid("config", e.to_string().trim_end().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| {
            ConfigError::invalid("config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Invalid { field, reason } => {
                ConfigError::invalid(field, format!("{}: {reason}", path.display()))
            }
        })
    }

    /// Applies the master seed to the component seeds.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.pretrain.seed = s;
            self.eval.base_seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate()?;
        self.model.validate()?;
        self.ttt.validate()?;
        self.pretrain.validate()?;
        self.eval.validate()?;
        if self.data.num_demos < 1 {
            return Err(ConfigError::invalid("data.num_demos", "must be at least 1"));
        }
        if self.bench.episodes < 1 {
            return Err(ConfigError::invalid("bench.episodes", "must be at least 1"));
        }
        if self.bench.max_steps < 1 {
            return Err(ConfigError::invalid("bench.max_steps", "must be at least 1"));
        }
        if self.model.obs != self.env.image_len() {
            return Err(ConfigError::invalid(
                "model.obs",
                format!("must equal env.image_side squared ({})", self.env.image_len()),
            ));
        }
        if self.model.instruction != self.env.num_goal_ids {
            return Err(ConfigError::invalid(
                "model.instruction",
                "must equal env.num_goal_ids",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Dimension;
    use crate::ttt::Mode;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for text in ["sed = 1", "[env]\nmax_step = 3", "[ttt]\nrh0 = 0.2", "[extra]\na = 1"] {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
seed = 7

[env]
max_steps = 30

[ttt]
rho = 0.5
mode = { fixed_threshold = 0.01 }

[eval]
episodes_per_dim = 12
modes = ["base", "adaptive"]
dimensions = [{ dimension = "robot", magnitude = 1.0 }]
"#;
        let mut cfg = RunConfig::from_toml(text).unwrap();
        cfg.resolve_seed();
        assert_eq!(cfg.env.max_steps, 30);
        assert_eq!(cfg.ttt.rho, 0.5);
        assert_eq!(cfg.ttt.mode, Mode::FixedThreshold(0.01));
        assert_eq!(cfg.eval.episodes_per_dim, 12);
        assert_eq!(cfg.eval.dimensions[0].dimension, Dimension::Robot);
        assert_eq!(cfg.pretrain.seed, 7);
        assert_eq!(cfg.eval.base_seed, 7);
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let cfg = RunConfig::from_toml("[env]\nimage_side = 8").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }

    #[test]
    fn json_echo_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
