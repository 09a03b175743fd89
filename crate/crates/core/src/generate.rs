//! Autoregressive decoding of motion-token answers and the
//! text/task/condition → motion pipeline.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, Corpus, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::instruct::{
    build_query, parse_motion_answer, render_full_prompt, sample_pose_condition, PoseCondition, PromptVariant, TaskKind,
};
use crate::lm::{AdapterState, LanguageModel, MotionSpelling};
use crate::vqvae::{MotionTokenSeq, VqVae};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Greedy,
    TopK,
    Temperature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            mode: SamplingMode::Greedy,
            k: 10,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    /// Top-k with k = 10 at temperature 1.
    pub fn top_k(max_new_tokens: usize, seed: u64) -> Self {
        Self {
            mode: SamplingMode::TopK,
            seed,
            ..Self::greedy(max_new_tokens)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.mode == SamplingMode::TopK && self.k == 0 {
            return Err(Error::Config("top-k needs k ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The EOS id was produced (and is the last generated id).
    Eos,
    /// `max_new_tokens` ids were produced.
    MaxLen,
    /// An id that cannot be part of a motion answer was produced (and is the
    /// last generated id).
    ParseStop,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_id(logits: &[f64], cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    let mut candidates: Vec<usize> = (0..logits.len()).collect();
    match cfg.mode {
        SamplingMode::Greedy => return Ok(argmax(logits)),
        SamplingMode::TopK => {
            candidates.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            candidates.truncate(cfg.k.min(logits.len()));
        }
        SamplingMode::Temperature => {}
    }
    let max = candidates.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| ((logits[i] - max) / cfg.temperature).exp())
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Generation {
        raw_answer: String::new(),
        message: format!("cannot sample from logits: {e}"),
    })?;
    Ok(candidates[dist.sample(rng)])
}

fn continues_answer(model: &LanguageModel, id: usize) -> bool {
    let vocab = model.vocab();
    match vocab.spelling() {
        MotionSpelling::Atomic => vocab.motion_code(id).is_some(),
        MotionSpelling::Digits => {
            let t = vocab.token(id);
            t == "," || (!t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()))
        }
    }
}

/// Appends sampled ids to `prompt` until EOS, a non-answer id, or the
/// budget. Returns the new ids only.
pub fn generate_tokens(
    model: &LanguageModel,
    adapter: Option<&AdapterState>,
    prompt: &[usize],
    cfg: &SamplingConfig,
) -> Result<(Vec<usize>, StopReason)> {
    cfg.validate()?;
    let max_len = model.config().max_seq_len;
    if prompt.is_empty() || prompt.len() + cfg.max_new_tokens > max_len {
        return Err(Error::domain(format!(
            "prompt of {} tokens plus {} new tokens does not fit max_seq_len {max_len}",
            prompt.len(),
            cfg.max_new_tokens
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eos = model.vocab().eos();
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens {
        let logits = model.next_logits(adapter, &ids)?;
        let id = sample_id(&logits, cfg, &mut rng)?;
        out.push(id);
        ids.push(id);
        if id == eos {
            return Ok((out, StopReason::Eos));
        }
        if !continues_answer(model, id) {
            return Ok((out, StopReason::ParseStop));
        }
    }
    Ok((out, StopReason::MaxLen))
}

/// Everything needed to go from a request to motion.
#[derive(Clone, Debug)]
pub struct Models {
    pub vqvae: VqVae,
    pub lm: LanguageModel,
    pub adapter: Option<AdapterState>,
    pub variant: PromptVariant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub tokens: MotionTokenSeq,
    /// Decoded motion in normalized feature space.
    pub motion: MotionSequence,
    pub raw_answer: String,
    pub stop_reason: StopReason,
    /// Parsing stopped before the end of the raw answer.
    pub truncated: bool,
    pub prompt: String,
    pub condition_tokens: Option<MotionTokenSeq>,
}

/// Generation from already tokenized condition codes.
pub fn generate_from_tokens(
    task: TaskKind,
    text: &str,
    condition_tokens: Option<MotionTokenSeq>,
    models: &Models,
    cfg: &SamplingConfig,
) -> Result<GenerationResult> {
    let query = build_query(task, text, condition_tokens.as_ref(), models.variant)?;
    let prompt = render_full_prompt(&query, false);
    let prompt_ids = models.lm.vocab().encode_prompt(&query)?;
    let (ids, stop_reason) = generate_tokens(&models.lm, models.adapter.as_ref(), &prompt_ids, cfg)?;
    let raw_answer = models.lm.vocab().decode_answer(&ids);
    let n_codes = models.vqvae.config().n_codes;
    let parsed = parse_motion_answer(&raw_answer, n_codes).map_err(|e| Error::Generation {
        raw_answer: raw_answer.clone(),
        message: e.to_string(),
    })?;
    let motion = models.vqvae.detokenize(&parsed.tokens)?;
    Ok(GenerationResult {
        tokens: parsed.tokens,
        motion,
        raw_answer,
        stop_reason,
        truncated: parsed.truncated,
        prompt,
        condition_tokens,
    })
}

/// Tokenize the condition, build and render the prompt, decode, parse and
/// detokenize. `pose_cond` holds normalized frames and must be present
/// exactly when the task carries poses.
pub fn generate_motion(
    task: TaskKind,
    text: &str,
    pose_cond: Option<&MotionSequence>,
    models: &Models,
    cfg: &SamplingConfig,
) -> Result<GenerationResult> {
    let tokens = match (task.has_pose(), pose_cond) {
        (true, Some(frames)) => Some(models.vqvae.tokenize_condition(frames)?),
        (false, None) => None,
        (true, None) => {
            return Err(Error::domain(format!("task {} requires a pose condition", task.name())));
        }
        (false, Some(_)) => return Err(Error::domain("text-only generation takes no pose condition")),
    };
    generate_from_tokens(task, text, tokens, models, cfg)
}

/// A failed generation, kept so it can be counted and inspected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub message: String,
    pub raw_answer: Option<String>,
}

#[derive(Clone, Debug)]
pub struct BatchItem {
    pub motion_id: String,
    pub text: String,
    pub task: TaskKind,
    /// Ground truth in normalized space.
    pub gt: MotionSequence,
    pub condition: Option<PoseCondition>,
    pub outcome: std::result::Result<GenerationResult, GenerationFailure>,
}

#[derive(Clone, Debug, Default)]
pub struct BatchOutput {
    pub items: Vec<BatchItem>,
}

impl BatchOutput {
    pub fn failures(&self) -> usize {
        self.items.iter().filter(|i| i.outcome.is_err()).count()
    }
}

/// One generation per annotation of `split`, in annotation order. Pose
/// conditions are drawn from the ground truth with a generator seeded by
/// `condition_seed`; item `i` samples with seed `cfg.seed + i`.
/// Failures are recorded, not raised.
pub fn batch_generate(
    corpus: &Corpus,
    split: Split,
    task: TaskKind,
    models: &Models,
    cfg: &SamplingConfig,
    condition_seed: u64,
) -> Result<BatchOutput> {
    cfg.validate()?;
    let stats = models
        .vqvae
        .stats()
        .ok_or_else(|| Error::domain("VQ-VAE has no normalization statistics"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(condition_seed);
    let mut items = Vec::new();
    for (i, ann) in corpus.split_annotations(split).into_iter().enumerate() {
        let raw = corpus
            .motion(&ann.motion_id)
            .ok_or_else(|| Error::domain(format!("unknown motion {}", ann.motion_id)))?;
        let gt = normalize(raw, stats)?;
        let condition = if task.has_pose() {
            Some(sample_pose_condition(&gt, task, &mut rng, &models.vqvae)?)
        } else {
            None
        };
        let item_cfg = SamplingConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let outcome = generate_from_tokens(
            task,
            &ann.text,
            condition.as_ref().map(|c| c.tokens.clone()),
            models,
            &item_cfg,
        )
        .map_err(|e| GenerationFailure {
            raw_answer: match &e {
                Error::Generation { raw_answer, .. } => Some(raw_answer.clone()),
                _ => None,
            },
            message: e.to_string(),
        });
        items.push(BatchItem {
            motion_id: ann.motion_id.clone(),
            text: ann.text.clone(),
            task,
            gt,
            condition,
            outcome,
        });
    }
    Ok(BatchOutput { items })
}
