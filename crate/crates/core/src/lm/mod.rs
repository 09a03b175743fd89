//! Decoder-only transformer language model with LoRA adapters.

mod lora;
mod train;
mod vocab;

pub use lora::{
    adapter_parameter_count, effective_weight, trainable_ratio, AdapterMeta, AdapterState, LoraConfig, LoraTarget,
};
pub use train::{
    answer_budget, estimate_memory_bytes, pretrain_base, train_lm, train_lora, train_step, LmTrainOutput, TrainLog,
    TrainSchedule,
};
pub use vocab::{
    build_prompt_vocab, build_vocab, build_vocab_with, scan_words, EncodedSample, MotionSpelling, Vocabulary, BOS, EOS,
    PAD, STRUCTURAL, UNK,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Mat, Var};
use crate::checkpoint::{Container, BASE_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{linear_weight, normal_matrix, ParamSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl LmConfig {
    /// 4 layers, 4 heads, width 256.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            model_dim: 256,
            ffn_dim: 1024,
            max_seq_len,
            vocab_size,
        }
    }

    /// 2 layers, 2 heads, width 64; fast enough for tests on one core.
    pub fn small(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            model_dim: 64,
            ffn_dim: 128,
            max_seq_len,
            vocab_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("LM dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("max_seq_len and vocab_size must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form base parameter count.
    pub fn parameter_count(&self) -> u64 {
        let (d, f, v) = (self.model_dim, self.ffn_dim, self.vocab_size);
        let layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
        (v * d + self.max_seq_len * d + self.n_layers * layer + 2 * d + v * d) as u64
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2_g: usize,
    ln2_b: usize,
    up_w: usize,
    up_b: usize,
    down_w: usize,
    down_b: usize,
}

#[derive(Clone, Debug)]
struct ModelIds {
    tok: usize,
    pos: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

impl ModelIds {
    fn resolve(params: &ParamSet, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| {
                let id = |n: &str| params.id(&format!("l{l}.{n}"));
                Ok(LayerIds {
                    ln1_g: id("ln1.g")?,
                    ln1_b: id("ln1.b")?,
                    q: id("q")?,
                    k: id("k")?,
                    v: id("v")?,
                    o: id("o")?,
                    ln2_g: id("ln2.g")?,
                    ln2_b: id("ln2.b")?,
                    up_w: id("ffn_up.w")?,
                    up_b: id("ffn_up.b")?,
                    down_w: id("ffn_down.w")?,
                    down_b: id("ffn_down.b")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok: params.id("tok_emb")?,
            pos: params.id("pos_emb")?,
            layers,
            lnf_g: params.id("ln_f.g")?,
            lnf_b: params.id("ln_f.b")?,
            head: params.id("head")?,
        })
    }
}

/// Dropout applied to adapter inputs during training.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// The base transformer and its vocabulary.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    config: LmConfig,
    vocab: Vocabulary,
    params: ParamSet,
    ids: ModelIds,
}

impl LanguageModel {
    pub fn new(config: LmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the vocabulary ({})",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.model_dim, config.ffn_dim, config.vocab_size);
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut p = ParamSet::new();
        p.insert("tok_emb", normal_matrix(v, d, emb_std, &mut rng));
        p.insert("pos_emb", normal_matrix(config.max_seq_len, d, emb_std, &mut rng));
        let proj_std = 1.0 / (d as f64).sqrt();
        for l in 0..config.n_layers {
            p.insert(format!("l{l}.ln1.g"), Mat::ones((1, d)));
            p.insert(format!("l{l}.ln1.b"), Mat::zeros((1, d)));
            for name in ["q", "k", "v", "o"] {
                p.insert(format!("l{l}.{name}"), normal_matrix(d, d, proj_std, &mut rng));
            }
            p.insert(format!("l{l}.ln2.g"), Mat::ones((1, d)));
            p.insert(format!("l{l}.ln2.b"), Mat::zeros((1, d)));
            p.insert(format!("l{l}.ffn_up.w"), linear_weight(f, d, &mut rng));
            p.insert(format!("l{l}.ffn_up.b"), Mat::zeros((1, f)));
            p.insert(
                format!("l{l}.ffn_down.w"),
                normal_matrix(d, f, 1.0 / (f as f64).sqrt(), &mut rng),
            );
            p.insert(format!("l{l}.ffn_down.b"), Mat::zeros((1, d)));
        }
        p.insert("ln_f.g", Mat::ones((1, d)));
        p.insert("ln_f.b", Mat::zeros((1, d)));
        p.insert("head", normal_matrix(v, d, emb_std, &mut rng));
        let ids = ModelIds::resolve(&p, config.n_layers)?;
        Ok(Self {
            config,
            vocab,
            params: p,
            ids,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Hex SHA-256 over the base tensors; adapters record it to detect a
    /// mismatched base.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.params.iter() {
            h.update(name.as_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::domain("empty token sequence"));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::domain(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::domain(format!(
                "token id {bad} is outside the vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass and returns the `[seq × vocab]` logits.
    pub(crate) fn build_logits(
        &self,
        g: &mut Graph,
        base: &[Var],
        adapter: Option<(&AdapterState, &[Var])>,
        ids: &[usize],
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let t = ids.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.gather(base[self.ids.tok], ids);
        let pos = g.gather(base[self.ids.pos], &positions);
        let mut x = g.add(tok, pos);
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (l, li) in self.ids.layers.iter().enumerate() {
            let mut project = |g: &mut Graph, input: Var, w: usize, target: LoraTarget| -> Var {
                let y = g.matmul_t(input, base[w]);
                let Some((state, vars)) = adapter else { return y };
                let Some((a, b)) = state.slot(l, target) else { return y };
                let mut xin = input;
                if let Some(d) = dropout.as_mut().filter(|d| d.p > 0.0) {
                    let keep = 1.0 / (1.0 - d.p);
                    let (rows, cols) = g.value(input).dim();
                    let mask =
                        Mat::from_shape_fn((rows, cols), |_| if d.rng.random::<f64>() < d.p { 0.0 } else { keep });
                    let m = g.constant(mask);
                    xin = g.mul(input, m);
                }
                let h = g.matmul_t(xin, vars[a]);
                let h = g.matmul_t(h, vars[b]);
                let h = g.scale(h, state.config().scale());
                g.add(y, h)
            };
            let h = g.layer_norm(x, base[li.ln1_g], base[li.ln1_b]);
            let q = project(g, h, li.q, LoraTarget::Q);
            let k = project(g, h, li.k, LoraTarget::K);
            let v = project(g, h, li.v, LoraTarget::V);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = g.slice_cols(q, s, e);
                let kh = g.slice_cols(k, s, e);
                let vh = g.slice_cols(v, s, e);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let att = g.causal_softmax(scores);
                heads.push(g.matmul(att, vh));
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let attn = project(g, cat, li.o, LoraTarget::O);
            x = g.add(x, attn);

            let h = g.layer_norm(x, base[li.ln2_g], base[li.ln2_b]);
            let up = project(g, h, li.up_w, LoraTarget::FfnUp);
            let up = g.add_row(up, base[li.up_b]);
            let up = g.relu(up);
            let down = project(g, up, li.down_w, LoraTarget::FfnDown);
            let down = g.add_row(down, base[li.down_b]);
            x = g.add(x, down);
        }
        let x = g.layer_norm(x, base[self.ids.lnf_g], base[self.ids.lnf_b]);
        Ok(g.matmul_t(x, base[self.ids.head]))
    }

    /// Next-token logits for every position, in eval mode.
    pub fn forward(&self, adapter: Option<&AdapterState>, ids: &[usize]) -> Result<Mat> {
        let mut g = Graph::new();
        let base = self.params.bind(&mut g, false);
        let bound = adapter.map(|a| (a, a.params().bind(&mut g, false)));
        let logits = self.build_logits(
            &mut g,
            &base,
            bound.as_ref().map(|(a, v)| (*a, v.as_slice())),
            ids,
            None,
        )?;
        Ok(g.value(logits).clone())
    }

    /// Logits of the token following `ids`.
    pub fn next_logits(&self, adapter: Option<&AdapterState>, ids: &[usize]) -> Result<Vec<f64>> {
        let logits = self.forward(adapter, ids)?;
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }

    pub fn to_container(&self) -> Container {
        Container::new(
            serde_json::json!({ "config": self.config, "vocab": self.vocab }),
            self.params.to_pairs(),
        )
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config: LmConfig = c.meta_as("config")?;
        let vocab: Vocabulary = c.meta_as("vocab")?;
        config.validate()?;
        let params = ParamSet::from_pairs(c.tensors);
        let ids = ModelIds::resolve(&params, config.n_layers)?;
        let model = Self {
            config,
            vocab,
            params,
            ids,
        };
        if model.params.element_count() != model.config.parameter_count() {
            return Err(Error::Format(
                "base checkpoint tensor sizes do not match its config".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path, BASE_MAGIC)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::load(path, BASE_MAGIC)?)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::instruct::{build_instruction, PromptVariant, TaskKind};
    use crate::vqvae::MotionTokenSeq;

    pub fn samples() -> Vec<crate::instruct::InstructionSample> {
        [
            ("a person walks", vec![1, 2, 3]),
            ("someone jumps high", vec![4, 4]),
            ("a slow wave", vec![0, 5, 6, 7]),
        ]
        .into_iter()
        .map(|(text, answer)| {
            build_instruction(
                TaskKind::TextOnly,
                text,
                None,
                &MotionTokenSeq::new(answer).unwrap(),
                PromptVariant::V0,
            )
            .unwrap()
        })
        .collect()
    }

    /// Two layers, two heads, width 8.
    pub fn tiny_model(seed: u64) -> LanguageModel {
        let vocab = build_prompt_vocab(&samples(), 8, MotionSpelling::Atomic).unwrap();
        let config = LmConfig {
            n_layers: 2,
            n_heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            max_seq_len: 96,
            vocab_size: vocab.len(),
        };
        LanguageModel::new(config, vocab, seed).unwrap()
    }

    /// An adapter on every target with `B` filled so it changes the output.
    pub fn active_adapter(model: &LanguageModel, seed: u64) -> AdapterState {
        let cfg = LoraConfig {
            r: 2,
            alpha: 4.0,
            targets: LoraTarget::ALL.to_vec(),
            dropout: 0.0,
        };
        let mut adapter = AdapterState::new(cfg, model.config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let names: Vec<String> = adapter.params().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.ends_with(".B") {
                let (r, c) = adapter.params().get(i).dim();
                *adapter.params_mut().get_mut(i) = normal_matrix(r, c, 0.3, &mut rng);
            }
        }
        adapter
    }
}
