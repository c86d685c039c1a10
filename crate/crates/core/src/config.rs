//! Run configuration: model, optimization and data settings in one JSON
//! document. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::preprocess::PreprocessConfig;
use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, LookaheadConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch: usize,
    pub lr_max: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Lookahead wrapper around Adam; absent or `null` disables it.
    #[serde(default)]
    pub lookahead: Option<LookaheadConfig>,
    pub seed: u64,
    /// Stop once inference-mode accuracy on the training images reaches
    /// this value.
    #[serde(default)]
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 16,
            lr_max: 1e-4,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            lookahead: Some(LookaheadConfig::default()),
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root following the class-directory convention.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// In-memory synthetic corpus, used when `root` is absent.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
}

fn default_split_ratio() -> f64 {
    0.7
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synth: None,
            split_ratio: default_split_ratio(),
            augment: AugmentConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(t.lr_max >= 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr_max) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr_max, got {} and {}", t.lr_min, t.lr_max)));
        }
        if let Some(la) = t.lookahead {
            if la.k == 0 || !(0.0..=1.0).contains(&la.alpha) {
                return Err(Error::Config("lookahead needs k >= 1 and alpha in [0, 1]".into()));
            }
        }
        if self.data.augment.multiplier == 0 {
            return Err(Error::Config("data.augment.multiplier must be at least 1".into()));
        }
        let ratio = self.data.split_ratio;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("data.split_ratio {ratio} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Desk-scale overfitting setup: the micro model on 32 synthetic
    /// images, all used for training.
    pub fn overfit() -> Self {
        Self {
            model: ModelConfig::micro(),
            train: TrainConfig {
                epochs: 200,
                batch: 16,
                lr_max: 1e-3,
                lr_min: 1e-5,
                adam: AdamConfig { weight_decay: 1e-5, ..AdamConfig::default() },
                lookahead: Some(LookaheadConfig::default()),
                seed: 17,
                target_train_accuracy: Some(0.95),
            },
            data: DataConfig {
                root: None,
                synth: Some(SynthSpec { n_per_class: 8, seed: 17, height: 64, width: 64, split_ratio: 1.0 }),
                split_ratio: 1.0,
                augment: AugmentConfig { multiplier: 1, ..AugmentConfig::default() },
                preprocess: PreprocessConfig::default(),
            },
        }
    }
}
