//! Resolved run configuration, written next to every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::BaseTrainConfig;
use crate::distill::Schedule;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::lora::LoraConfig;
use crate::seed;
use crate::selector::ClassifierTrainConfig;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Second synthetic corpus used only by the first distillation stage.
    pub pretrain_size: usize,
    pub val_size: usize,
    pub noise_clips_per_category: usize,
    pub base: BaseTrainConfig,
    pub fusion: FusionConfig,
    pub lora: LoraConfig,
    pub schedule: Schedule,
    pub classifier: ClassifierTrainConfig,
    pub classifier_train_size: usize,
    pub classifier_val_size: usize,
    pub eval_snrs: Vec<f64>,
}

/// Default multiplier on the reference step counts.
pub const DESK_SCALE_RATIO: f64 = 0.006;

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            train_size: 2000,
            test_size: 200,
            pretrain_size: 2000,
            val_size: 64,
            noise_clips_per_category: 400,
            base: BaseTrainConfig::default(),
            fusion: FusionConfig::default(),
            lora: LoraConfig::default(),
            schedule: Schedule {
                scale_ratio: DESK_SCALE_RATIO,
                ..Default::default()
            },
            classifier: ClassifierTrainConfig::default(),
            classifier_train_size: 4000,
            classifier_val_size: 800,
            eval_snrs: crate::evalkit::GRID_SNRS.to_vec(),
        };
        c.reseed();
        c
    }
}

impl RunConfig {
    /// Default configuration with every component seed derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = RunConfig {
            seed,
            ..Default::default()
        };
        c.reseed();
        c
    }

    pub fn reseed(&mut self) {
        let s = self.seed;
        self.base.seed = seed::derive(s, &[seed::tag("base")]);
        self.schedule.seed = seed::derive(s, &[seed::tag("adapters")]);
        self.classifier.seed = seed::derive(s, &[seed::tag("classifier")]);
    }

    pub fn scale_ratio(&self) -> f64 {
        self.schedule.scale_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.test_size == 0 || self.val_size == 0 || self.pretrain_size == 0 {
            return Err(Error::invalid("corpus sizes must be positive"));
        }
        if self.noise_clips_per_category < 10 {
            return Err(Error::invalid("need at least 10 noise clips per category for a 80/10/10 split"));
        }
        if !(self.schedule.scale_ratio > 0.0) {
            return Err(Error::invalid("scale ratio must be positive"));
        }
        if !(0.0..=1.0).contains(&self.schedule.clean_prob) {
            return Err(Error::invalid("clean_prob must lie in [0, 1]"));
        }
        if self.lora.rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        if self.base.model.d_model % self.base.model.heads != 0 || self.base.model.d_model != self.fusion.d_model {
            return Err(Error::invalid("model width must divide into heads and match the fusion width"));
        }
        Ok(())
    }
}

/// What every artifact directory records about the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: RunConfig,
    pub git_describe: String,
    pub seed: u64,
}

impl RunInfo {
    pub fn new(config: RunConfig, git_describe: impl Into<String>) -> Self {
        RunInfo {
            seed: config.seed,
            config,
            git_describe: git_describe.into(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<RunInfo> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::Missing(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_json() {
        let c = RunConfig::with_seed(7);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 3, "test_size": 20}"#).unwrap();
        assert_eq!(partial.test_size, 20);
        assert_eq!(partial.train_size, 2000);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn component_seeds_follow_master() {
        assert_ne!(RunConfig::with_seed(1).base.seed, RunConfig::with_seed(2).base.seed);
        assert_eq!(RunConfig::with_seed(1), RunConfig::with_seed(1));
    }
}
