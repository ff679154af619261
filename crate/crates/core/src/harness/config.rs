//! Run configuration as one TOML document.
//!
//! ```toml
//! seed = 0
//!
//! [model]        # architecture, see `ModelConfig`
//! [drop]         # mask = { strategy = "structured", n = 2, k = 1 }, path/class drop
//! [mask_token]   # trainable = true
//! [time]         # logit-normal loc / scale
//! [pretrain]     # omit to skip the phase
//! [finetune]     # omit to skip the phase
//! [sample]       # omit to skip sampling
//! [data]         # blob dataset
//! [ckpt]         # every = 1000
//! [io]           # out_dir = "runs/default"
//! ```
//!
//! Every key has a default and unknown keys are rejected. A phase section
//! that is absent is skipped; a present one starts from that phase's
//! defaults ([`default_pretrain`], [`default_finetune`]).

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use super::data::BlobDatasetSpec;
use crate::error::{Result, SprintError};
use crate::flow::TimeDist;
use crate::net::ModelConfig;
use crate::sample::GuidanceMode;
use crate::train::{DropConfig, Phase, PhaseConfig, TrainConfig};

pub const ENV_SEED: &str = "SPRINT_SEED";
pub const ENV_OUT: &str = "SPRINT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskTokenConfig {
    pub trainable: bool,
}

impl Default for MaskTokenConfig {
    fn default() -> Self {
        Self { trainable: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub w: f64,
    /// Samples per guidance mode, labels cycling through the classes.
    pub count: usize,
    pub modes: Vec<GuidanceMode>,
    /// Sample from the EMA weights rather than the raw weights.
    pub use_ema: bool,
    /// Write every sample as an array file and a PNG.
    pub save: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            w: 2.0,
            count: 400,
            modes: GuidanceMode::ALL.to_vec(),
            use_ema: true,
            save: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkptConfig {
    /// Write a checkpoint every this many steps of each phase; 0 disables.
    pub every: u64,
}

impl Default for CkptConfig {
    fn default() -> Self {
        Self { every: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub drop: DropConfig,
    pub mask_token: MaskTokenConfig,
    pub time: TimeDist,
    #[serde(default, deserialize_with = "pretrain_section", skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PhaseConfig>,
    #[serde(default, deserialize_with = "finetune_section", skip_serializing_if = "Option::is_none")]
    pub finetune: Option<PhaseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleConfig>,
    pub data: BlobDatasetSpec,
    pub ckpt: CkptConfig,
    pub io: IoConfig,
}

/// Desk-scale pre-training schedule: constant learning rate.
pub fn default_pretrain() -> PhaseConfig {
    PhaseConfig {
        iterations: 5000,
        batch_size: 16,
        lr: 1e-3,
        lr_start: 1e-3,
        warmup: 0,
        ema_decay: 0.999,
        ema_warmup_decay: 0.999,
        ..PhaseConfig::default()
    }
}

/// Desk-scale fine-tuning schedule: linear warmup, lower EMA decay while it
/// lasts.
pub fn default_finetune() -> PhaseConfig {
    PhaseConfig {
        iterations: 1000,
        batch_size: 16,
        lr: 1e-3,
        lr_start: 1e-5,
        warmup: 100,
        ema_decay: 0.999,
        ema_warmup_decay: 0.99,
        ..PhaseConfig::default()
    }
}

/// Keys present in the document override the phase's own defaults.
fn section_over<'de, D: Deserializer<'de>>(base: PhaseConfig, d: D) -> std::result::Result<Option<PhaseConfig>, D::Error> {
    let given = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(base).map_err(D::Error::custom)?;
    merged.extend(given);
    merged.try_into().map(Some).map_err(D::Error::custom)
}

fn pretrain_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<PhaseConfig>, D::Error> {
    section_over(default_pretrain(), d)
}

fn finetune_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<PhaseConfig>, D::Error> {
    section_over(default_finetune(), d)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            drop: DropConfig::default(),
            mask_token: MaskTokenConfig::default(),
            time: TimeDist::default(),
            pretrain: Some(default_pretrain()),
            finetune: Some(default_finetune()),
            sample: Some(SampleConfig::default()),
            data: BlobDatasetSpec::default(),
            ckpt: CkptConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().replace('\n', " ");
            match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    SprintError::Config(format!("line {line}: {msg}"))
                }
                None => SprintError::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SprintError::Config(e.to_string()))
    }

    /// Applies `SPRINT_SEED` and `SPRINT_OUT` as read by `var`.
    pub fn apply_overrides(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(seed) = var(ENV_SEED) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| SprintError::Config(format!("{ENV_SEED}={seed} is not a u64")))?;
        }
        if let Some(out) = var(ENV_OUT) {
            self.io.out_dir = PathBuf::from(out);
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let (h, w) = self.model.image_size();
        if h != self.data.size || w != self.data.size || self.model.channels != self.data.channels {
            return Err(SprintError::Config(format!(
                "model expects {h}x{w}x{} images but data produces {}x{}x{}",
                self.model.channels, self.data.size, self.data.size, self.data.channels
            )));
        }
        if self.model.num_classes != self.data.classes {
            return Err(SprintError::Config(format!(
                "model has {} classes, data has {}",
                self.model.num_classes, self.data.classes
            )));
        }
        for phase in [Phase::Pretrain, Phase::Finetune] {
            if let Some(tc) = self.train_config(phase) {
                tc.validate()?;
            }
        }
        if let Some(s) = &self.sample {
            if s.steps == 0 || !(s.w >= 0.0) || s.count == 0 {
                return Err(SprintError::Config(
                    "sample needs steps >= 1, count >= 1 and w >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, phase: Phase) -> Option<TrainConfig> {
        let schedule = match phase {
            Phase::Pretrain => self.pretrain.clone()?,
            Phase::Finetune => self.finetune.clone()?,
        };
        Some(TrainConfig {
            phase,
            schedule,
            drop: self.drop.clone(),
            time: self.time,
            mask_token_trainable: self.mask_token.trainable,
        })
    }
}
