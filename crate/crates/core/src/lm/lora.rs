//! Low-rank adapters on the frozen base projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LmConfig;
use crate::autodiff::Mat;
use crate::checkpoint::{Container, LORA_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{normal_matrix, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    FfnUp,
    FfnDown,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::FfnUp,
        LoraTarget::FfnDown,
    ];
    pub const ATTENTION: [LoraTarget; 4] = [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::FfnUp => "ffn_up",
            LoraTarget::FfnDown => "ffn_down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown LoRA target {s:?}")))
    }

    /// `(d_in, d_out)` of the adapted projection.
    pub fn dims(self, config: &LmConfig) -> (usize, usize) {
        match self {
            LoraTarget::Q | LoraTarget::K | LoraTarget::V | LoraTarget::O => (config.model_dim, config.model_dim),
            LoraTarget::FfnUp => (config.model_dim, config.ffn_dim),
            LoraTarget::FfnDown => (config.ffn_dim, config.model_dim),
        }
    }

    pub(crate) fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 16.0,
            targets: LoraTarget::ATTENTION.to_vec(),
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        if t.len() != self.targets.len() {
            return Err(Error::Config("duplicate LoRA target".into()));
        }
        Ok(())
    }
}

/// `W + (alpha / r) · B · A` for `W: [d_out × d_in]`, `A: [r × d_in]`,
/// `B: [d_out × r]`.
pub fn effective_weight(w: &Mat, a: &Mat, b: &Mat, alpha: f64, r: usize) -> Result<Mat> {
    let (d_out, d_in) = w.dim();
    if a.dim() != (r, d_in) || b.dim() != (d_out, r) || r == 0 {
        return Err(Error::domain(format!(
            "LoRA shapes do not conform: W {:?}, A {:?}, B {:?}, r {r}",
            w.dim(),
            a.dim(),
            b.dim()
        )));
    }
    Ok(w + &(b.dot(a) * (alpha / r as f64)))
}

/// Adapter pairs for every layer and target.
#[derive(Clone, Debug)]
pub struct AdapterState {
    config: LoraConfig,
    params: ParamSet,
    /// `[layer][target slot]` → `(A id, B id)`
    slots: Vec<[Option<(usize, usize)>; 6]>,
}

impl AdapterState {
    /// `A` small random, `B` zero.
    pub fn new(config: LoraConfig, lm: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for layer in 0..lm.n_layers {
            for &t in &config.targets {
                let (d_in, d_out) = t.dims(lm);
                let a = normal_matrix(config.r, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
                params.insert(format!("l{layer}.{}.A", t.name()), a);
                params.insert(format!("l{layer}.{}.B", t.name()), Mat::zeros((d_out, config.r)));
            }
        }
        Self::from_params(config, lm, params)
    }

    fn from_params(config: LoraConfig, lm: &LmConfig, params: ParamSet) -> Result<Self> {
        let mut slots = vec![[None; 6]; lm.n_layers];
        for (layer, row) in slots.iter_mut().enumerate() {
            for &t in &config.targets {
                let a = params.id(&format!("l{layer}.{}.A", t.name()))?;
                let b = params.id(&format!("l{layer}.{}.B", t.name()))?;
                let (d_in, d_out) = t.dims(lm);
                if params.get(a).dim() != (config.r, d_in) || params.get(b).dim() != (d_out, config.r) {
                    return Err(Error::Format(format!(
                        "adapter l{layer}.{} has the wrong shape",
                        t.name()
                    )));
                }
                row[t.slot()] = Some((a, b));
            }
        }
        if params.len() != 2 * lm.n_layers * config.targets.len() {
            return Err(Error::Format("adapter has unexpected tensors".into()));
        }
        Ok(Self { config, params, slots })
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn slot(&self, layer: usize, target: LoraTarget) -> Option<(usize, usize)> {
        self.slots.get(layer).and_then(|s| s[target.slot()])
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> u64 {
        self.params.element_count()
    }

    pub fn to_container(&self, meta: &AdapterMeta) -> Container {
        Container::new(
            serde_json::json!({ "lora": self.config, "adapter": meta }),
            self.params.to_pairs(),
        )
    }

    pub fn from_container(c: Container) -> Result<(Self, AdapterMeta)> {
        let config: LoraConfig = c.meta_as("lora")?;
        let meta: AdapterMeta = c.meta_as("adapter")?;
        config.validate()?;
        let state = Self::from_params(config, &meta.lm, ParamSet::from_pairs(c.tensors))?;
        Ok((state, meta))
    }

    pub fn save(&self, path: &std::path::Path, meta: &AdapterMeta) -> Result<()> {
        self.to_container(meta).save(path, LORA_MAGIC)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, AdapterMeta)> {
        Self::from_container(Container::load(path, LORA_MAGIC)?)
    }
}

/// What an adapter checkpoint records about the model it was trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub lm: LmConfig,
    /// [`super::LanguageModel::digest`] of the frozen base.
    pub base_digest: String,
    /// Default generation budget in tokens.
    pub answer_budget: usize,
}

/// Closed-form adapter size: `Σ r·(d_in + d_out)` over layers and targets.
pub fn adapter_parameter_count(lora: &LoraConfig, lm: &LmConfig) -> u64 {
    let per_layer: usize = lora
        .targets
        .iter()
        .map(|t| {
            let (i, o) = t.dims(lm);
            lora.r * (i + o)
        })
        .sum();
    (per_layer * lm.n_layers) as u64
}

/// Adapter scalars over base scalars.
pub fn trainable_ratio(adapter: &AdapterState, base: &LmConfig) -> f64 {
    adapter.parameter_count() as f64 / base.parameter_count() as f64
}
