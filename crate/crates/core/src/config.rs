//! Run configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Split, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ExtractorConfig};
use crate::generate::{SamplingConfig, SamplingMode};
use crate::instruct::{PromptVariant, TaskKind};
use crate::lm::{LmConfig, LoraConfig, MotionSpelling, TrainSchedule};
use crate::vqvae::{CodebookInit, VqTrainConfig, VqVaeConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory; a synthetic corpus is generated when unset.
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub n_codes: usize,
    pub code_dim: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub decay_at: f64,
    pub lr_decay: f64,
    pub batch_windows: usize,
    pub codebook_init: CodebookInit,
}

impl Default for VqSection {
    fn default() -> Self {
        let m = VqVaeConfig::desk(1);
        let t = VqTrainConfig::default();
        Self {
            n_codes: m.n_codes,
            code_dim: m.code_dim,
            downsample: m.downsample,
            hidden: m.hidden,
            beta: m.beta,
            steps: t.steps,
            lr: t.lr,
            decay_at: t.decay_at,
            lr_decay: t.lr_decay,
            batch_windows: t.batch_windows,
            codebook_init: t.codebook_init,
        }
    }
}

impl VqSection {
    pub fn model(&self, feature_dim: usize) -> VqVaeConfig {
        VqVaeConfig {
            feature_dim,
            n_codes: self.n_codes,
            code_dim: self.code_dim,
            downsample: self.downsample,
            hidden: self.hidden,
            beta: self.beta,
        }
    }

    pub fn training(&self, seed: u64) -> VqTrainConfig {
        VqTrainConfig {
            steps: self.steps,
            lr: self.lr,
            decay_at: self.decay_at,
            lr_decay: self.lr_decay,
            batch_windows: self.batch_windows,
            seed,
            codebook_init: self.codebook_init,
            ..VqTrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub lora: LoraConfig,
    pub pretrain: TrainSchedule,
    pub train: TrainSchedule,
    pub tasks: Vec<TaskKind>,
    pub variant: PromptVariant,
    pub spelling: MotionSpelling,
}

impl Default for LmSection {
    fn default() -> Self {
        let arch = LmConfig::small(0, 0);
        let schedule = TrainSchedule {
            steps: 300,
            batch_size: 16,
            micro_batch: 4,
            ..TrainSchedule::default()
        };
        Self {
            n_layers: arch.n_layers,
            n_heads: arch.n_heads,
            model_dim: arch.model_dim,
            ffn_dim: arch.ffn_dim,
            lora: LoraConfig::default(),
            pretrain: TrainSchedule {
                steps: 100,
                ..schedule.clone()
            },
            train: schedule,
            tasks: TaskKind::ALL.to_vec(),
            variant: PromptVariant::V0,
            spelling: MotionSpelling::Atomic,
        }
    }
}

impl LmSection {
    /// Layer shape; vocabulary size and sequence length are filled in when
    /// the vocabulary is built.
    pub fn arch(&self) -> LmConfig {
        LmConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            max_seq_len: 0,
            vocab_size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub sampling: SamplingMode,
    pub top_k: usize,
    pub temperature: f64,
    /// Generation budget; the adapter's recorded budget when unset.
    pub max_new_tokens: Option<usize>,
    pub metrics: EvalConfig,
    pub extractor: ExtractorConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Val,
            sampling: SamplingMode::Greedy,
            top_k: 10,
            temperature: 1.0,
            max_new_tokens: None,
            metrics: EvalConfig::default(),
            extractor: ExtractorConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn sampling_config(&self, budget: usize, seed: u64) -> SamplingConfig {
        SamplingConfig {
            mode: self.sampling,
            k: self.top_k,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens.unwrap_or(budget),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: SynthConfig,
    pub vqvae: VqSection,
    pub lm: LmSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            data: SynthConfig {
                n_clips: 128,
                n_families: 8,
                val_fraction: 0.25,
                ..SynthConfig::default()
            },
            vqvae: VqSection::default(),
            lm: LmSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Named stages whose seeds derive from the global seed.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Data = 1,
    VqVae,
    Instructions,
    Pretrain,
    Lora,
    Extractor,
    Conditions,
    Sampling,
    Metrics,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((stage as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
    }

    /// Hex SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.paths.data {
            if !p.is_dir() {
                return Err(Error::Config(format!(
                    "dataset directory {} does not exist",
                    p.display()
                )));
            }
        }
        self.vqvae.model(self.data.feature_dim.max(1)).validate()?;
        let v = &self.vqvae;
        if !(v.lr > 0.0 && v.lr_decay > 0.0 && (0.0..=1.0).contains(&v.decay_at)) {
            return Err(Error::Config(
                "vqvae.lr and vqvae.lr_decay must be positive and vqvae.decay_at within [0, 1]".into(),
            ));
        }
        self.lm.lora.validate()?;
        self.lm.train.accumulation_steps()?;
        self.lm.pretrain.accumulation_steps()?;
        if self.lm.tasks.is_empty() {
            return Err(Error::Config("lm.tasks must name at least one task".into()));
        }
        LmConfig {
            max_seq_len: 1,
            vocab_size: 1,
            ..self.lm.arch()
        }
        .validate()
    }
}
