//! Declarative run configuration (TOML) and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::metrics::MetricConfig;
use crate::navigator::NavigatorConfig;
use crate::speaker::SpeakerConfig;
use crate::text::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Pretrain,
    #[default]
    Finetune,
    Eval,
    MtstTrain,
    MtstInfer,
}

/// Which external data the navigator is pretrained on before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalArm {
    /// Target data only.
    #[default]
    None,
    /// External routes with their original machine instructions.
    External,
    /// External routes with speaker-rewritten instructions.
    ExternalStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub embedder_lr: f64,
    pub batch_size: usize,
    /// Fine-tuning (or plain training) epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Step cap for closed-loop rollouts.
    pub max_rollout_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.5e-4,
            embedder_lr: 1e-5,
            batch_size: 30,
            epochs: 10,
            pretrain_epochs: 10,
            lr_decay: 0.5,
            decay_every: 5,
            max_rollout_steps: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtstConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Masking mode for the target (human) corpus used in training.
    pub train_mode: MaskMode,
    /// Masking mode for the external corpus at inference.
    pub infer_mode: MaskMode,
}

impl Default for MtstConfig {
    fn default() -> Self {
        MtstConfig { lr: 1e-3, batch_size: 10, epochs: 20, train_mode: MaskMode::ObjectMask, infer_mode: MaskMode::StreetnameMask }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Drop trajectories visiting more panoramas than this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_panoramas: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: Stage,
    pub arm: ExternalArm,
    pub train: TrainConfig,
    pub mtst: MtstConfig,
    pub navigator: NavigatorConfig,
    pub speaker: SpeakerConfig,
    pub metrics: MetricConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let t = &self.train;
        let bad = |m: String| Err(ModelError::Config(m));
        if t.batch_size == 0 || t.epochs == 0 {
            return bad(format!("train.batch_size {} and train.epochs {} must be positive", t.batch_size, t.epochs));
        }
        if !(t.lr > 0.0) || !(t.embedder_lr >= 0.0) {
            return bad(format!("learning rates {} / {} out of range", t.lr, t.embedder_lr));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) || t.decay_every == 0 {
            return bad(format!("lr_decay {} every {} epochs", t.lr_decay, t.decay_every));
        }
        if t.max_rollout_steps == 0 {
            return bad("train.max_rollout_steps must be positive".into());
        }
        let m = &self.mtst;
        if m.batch_size == 0 || m.epochs == 0 || !(m.lr > 0.0) {
            return bad(format!("mtst batch {} epochs {} lr {}", m.batch_size, m.epochs, m.lr));
        }
        if self.data.max_panoramas == Some(0) {
            return bad("data.max_panoramas must be positive".into());
        }
        self.navigator.validate()?;
        self.speaker.validate()?;
        self.metrics.validate().map_err(ModelError::Config)?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form with `seed` and `stage` removed,
    /// so that every stage of one experiment shares a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("struct");
        obj.remove("seed");
        obj.remove("stage");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn adam(&self) -> crate::autodiff::AdamConfig {
        crate::autodiff::AdamConfig {
            lr: self.train.lr,
            embedder_lr: Some(self.train.embedder_lr),
            ..Default::default()
        }
    }
}
