//! TOML run configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::BackboneConfig;
use crate::registry::SnapshotPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub losses: LossWeights,
    pub registry: RegistryConfig,
    pub stability: StabilityConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    /// Training images per class; the test split gets a fifth of that.
    pub per_class: usize,
    pub image_size: usize,
    pub num_tasks: usize,
    /// Root holding `train/` and `test/` class folders when `source = "folder"`.
    pub folder: Option<PathBuf>,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 16,
            per_class: 100,
            image_size: 56,
            num_tasks: 4,
            folder: None,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub prototypes: usize,
    /// Widths of the stride-2 stages before the prototype layer.
    pub channels: Vec<usize>,
    pub tau_init: f64,
    pub learnable_tau: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prototypes: 32,
            channels: vec![16, 32, 64],
            tau_init: 1.0,
            learnable_tau: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub precision: Precision,
    pub epochs_pretrain: usize,
    pub epochs_train: usize,
    /// Images per step; each contributes two views.
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_tau: f64,
    /// Warm-restart cycles of the head schedule within the training phase.
    pub head_restarts: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            epochs_pretrain: 5,
            epochs_train: 10,
            batch_size: 32,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            lr_tau: 1e-2,
            head_restarts: 2,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistryConfig {
    pub activation_threshold: f64,
    pub percentile: f64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            activation_threshold: 0.5,
            percentile: 75.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub snapshots: SnapshotPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Presence scores below this are zeroed before scoring.
    pub presence_threshold: f64,
    /// Minimum importance for a prototype to appear in explanations.
    pub importance_threshold: f64,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            presence_threshold: 0.1,
            importance_threshold: 0.01,
            top_k: 5,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            losses: LossWeights::default(),
            registry: RegistryConfig::default(),
            stability: StabilityConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Components that can be switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Stability,
    Decorrelation,
    Hoyer,
    Temperature,
    DecorrelationAndHoyer,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LR" => Ok(Self::Stability),
            "LD" => Ok(Self::Decorrelation),
            "LH" => Ok(Self::Hoyer),
            "tau" => Ok(Self::Temperature),
            "LD+LH" => Ok(Self::DecorrelationAndHoyer),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}'; expected LR, LD, LH, tau or LD+LH"
            ))),
        }
    }
}

impl RunConfig {
    /// Defaults recalibrated for a from-scratch backbone on the synthetic
    /// stream: smaller batches, faster backbone and head rates, and a larger
    /// initial temperature. Matches `configs/desk.toml`.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.tau_init = 10.0;
        c.trainer.batch_size = 8;
        c.trainer.lr_backbone = 1e-3;
        c.trainer.lr_head = 1e-2;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::new(self.data.image_size, &self.model.channels, self.model.prototypes)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_tasks == 0 || d.num_classes % d.num_tasks != 0 {
            return Err(Error::Config(format!(
                "num_classes {} is not divisible by num_tasks {}; valid task counts: {:?}",
                d.num_classes,
                d.num_tasks,
                (1..=d.num_classes).filter(|k| d.num_classes % k == 0).collect::<Vec<_>>()
            )));
        }
        if d.source == DataSource::Folder && d.folder.is_none() {
            return Err(Error::Config("data.source = \"folder\" needs data.folder".into()));
        }
        d.augment.validate()?;
        self.backbone().validate()?;
        if self.model.tau_init <= 0.0 {
            return Err(Error::Config("model.tau_init must be positive".into()));
        }
        let t = &self.trainer;
        if t.batch_size == 0 || t.epochs_train == 0 {
            return Err(Error::Config("trainer.batch_size and trainer.epochs_train must be >= 1".into()));
        }
        if t.head_restarts == 0 {
            return Err(Error::Config("trainer.head_restarts must be >= 1".into()));
        }
        for (name, v) in [("lr_backbone", t.lr_backbone), ("lr_head", t.lr_head), ("lr_tau", t.lr_tau)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("trainer.{name} must be >= 0")));
            }
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and adam_eps > 0".into()));
        }
        self.losses.validate()?;
        let r = &self.registry;
        if !(0.0..=100.0).contains(&r.percentile) || !(0.0..=1.0).contains(&r.activation_threshold) {
            return Err(Error::Config("registry.percentile in [0, 100], activation_threshold in [0, 1]".into()));
        }
        Ok(())
    }

    /// Copy with one component disabled.
    pub fn ablated(&self, ablation: Ablation) -> Self {
        let mut c = self.clone();
        match ablation {
            Ablation::Stability => c.losses.lambda_r = 0.0,
            Ablation::Decorrelation => c.losses.lambda_d = 0.0,
            Ablation::Hoyer => c.losses.lambda_h = 0.0,
            Ablation::Temperature => {
                c.model.tau_init = 1.0;
                c.model.learnable_tau = false;
            }
            Ablation::DecorrelationAndHoyer => {
                c.losses.lambda_d = 0.0;
                c.losses.lambda_h = 0.0;
            }
        }
        c
    }
}
