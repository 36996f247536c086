//! File-first run configuration with flag overrides. Precedence:
//! flags > config file > defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gfnet_core::model::ModelConfig;
use gfnet_core::trainer::{PpoConfig, SupervisedStageConfig};

pub const CONFIG_ENV: &str = "GF_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Which split calibrates confidence thresholds.
    pub calibrate_on: String,
    /// Worker lanes for evaluation; 0 = library default.
    pub concurrency: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            calibrate_on: "val".to_string(),
            concurrency: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub stage0: SupervisedStageConfig,
    pub stage1: SupervisedStageConfig,
    pub stage2: PpoConfig,
    pub stage3: SupervisedStageConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        RunConfig {
            seed,
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::desk_default(),
            stage0: SupervisedStageConfig {
                epochs: 6,
                encoder_lr: 0.05,
                ..SupervisedStageConfig::stage1_default(seed)
            },
            stage1: SupervisedStageConfig {
                epochs: 20,
                ..SupervisedStageConfig::stage1_default(seed)
            },
            stage2: PpoConfig {
                epochs: 8,
                rollout_batch: 250,
                minibatch: 250,
                ..PpoConfig::default_with_seed(seed)
            },
            stage3: SupervisedStageConfig {
                epochs: 6,
                ..SupervisedStageConfig::stage3_default(seed)
            },
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Propagate the master seed into every stage section.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.stage0.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.stage3.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !matches!(self.eval.calibrate_on.as_str(), "val" | "train" | "test") {
            bail!(
                "eval.calibrate_on must be val, train, or test, got {}",
                self.eval.calibrate_on
            );
        }
        Ok(())
    }
}

/// Resolve the config path: explicit flag, then $GF_CONFIG, then defaults.
pub fn resolve(
    config_flag: Option<&Path>,
    seed: Option<u64>,
    dataset: Option<&Path>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = match config_flag {
        Some(p) => RunConfig::load(p)?,
        None => match std::env::var_os(CONFIG_ENV) {
            Some(p) => RunConfig::load(Path::new(&p))?,
            None => RunConfig::default(),
        },
    };
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    if let Some(d) = dataset {
        cfg.dataset_dir = d.to_path_buf();
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 3\nnot_a_key = 1\n";
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let text = "seed = 3\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model, ModelConfig::desk_default());
    }
}
