//! Base pretraining and LoRA fine-tuning with gradient accumulation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_prompt_vocab, AdapterState, Dropout, EncodedSample, LanguageModel, LmConfig, LoraConfig, MotionSpelling,
};
use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::instruct::InstructionSample;
use crate::nn::{AdamW, GradAccumulator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Optimizer steps.
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Sequences per accumulation chunk.
    pub micro_batch: usize,
    pub seed: u64,
    pub memory_budget_bytes: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            weight_decay: 0.01,
            batch_size: 256,
            micro_batch: 4,
            seed: 0,
            memory_budget_bytes: 4 << 30,
        }
    }
}

impl TrainSchedule {
    pub fn accumulation_steps(&self) -> Result<usize> {
        if self.micro_batch == 0 || self.batch_size == 0 || !self.batch_size.is_multiple_of(self.micro_batch) {
            return Err(Error::Config(format!(
                "batch size {} must be a positive multiple of the micro-batch {}",
                self.batch_size, self.micro_batch
            )));
        }
        Ok(self.batch_size / self.micro_batch)
    }

    fn validate(&self) -> Result<()> {
        self.accumulation_steps()?;
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Mean answer-token cross-entropy per optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Rough peak bytes for one micro-batch: parameters, optimizer moments for
/// the trainable part, and the recorded activations with their gradients.
pub fn estimate_memory_bytes(config: &LmConfig, seq_len: usize, micro_batch: usize, trainable: u64) -> u64 {
    let (t, d, f, v, h) = (
        seq_len as u64,
        config.model_dim as u64,
        config.ffn_dim as u64,
        config.vocab_size as u64,
        config.n_heads as u64,
    );
    let per_layer = t * (14 * d + 3 * f) + 3 * h * t * t;
    let activations = config.n_layers as u64 * per_layer + 3 * t * v + 2 * t * d;
    let per_sequence = 2 * 8 * activations;
    8 * config.parameter_count() + 4 * 8 * trainable + micro_batch as u64 * per_sequence
}

fn check_memory(
    model: &LanguageModel,
    samples: &[EncodedSample],
    schedule: &TrainSchedule,
    trainable: u64,
) -> Result<()> {
    let longest = samples.iter().map(|s| s.ids.len()).max().unwrap_or(0);
    let need = estimate_memory_bytes(model.config(), longest, schedule.micro_batch, trainable);
    if need > schedule.memory_budget_bytes {
        return Err(Error::Config(format!(
            "estimated {need} bytes exceeds the memory budget of {} bytes",
            schedule.memory_budget_bytes
        )));
    }
    Ok(())
}

/// Endless seeded sequence of shuffled epochs.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct SequenceGrads {
    ce_sum: f64,
    grads: Grads,
    base: Vec<Var>,
    adapter: Vec<Var>,
}

fn sequence_grads(
    model: &LanguageModel,
    adapter: Option<&AdapterState>,
    train_base: bool,
    ids: &[usize],
    targets: &[Option<usize>],
    seed: f64,
    dropout: Option<Dropout<'_>>,
) -> Result<SequenceGrads> {
    let mut g = Graph::new();
    let base = model.params().bind(&mut g, train_base);
    let adapter_vars = adapter.map(|a| a.params().bind(&mut g, true)).unwrap_or_default();
    let logits = model.build_logits(
        &mut g,
        &base,
        adapter.map(|a| (a, adapter_vars.as_slice())),
        ids,
        dropout,
    )?;
    let loss = g.cross_entropy_sum(logits, targets);
    let ce_sum = g.scalar(loss);
    let grads = g.backward(loss, seed);
    Ok(SequenceGrads {
        ce_sum,
        grads,
        base,
        adapter: adapter_vars,
    })
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Training(format!("non-finite loss {loss}")))
    }
}

/// One optimizer step on the adapter. The loss is the cross-entropy over
/// answer positions (answer tokens and the closing EOS) averaged over the
/// whole batch; base weights receive no gradient.
pub fn train_step(
    model: &LanguageModel,
    adapter: &mut AdapterState,
    optimizer: &mut AdamW,
    batch: &[&EncodedSample],
    micro_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let total: usize = batch.iter().map(|s| s.answer_len()).sum();
    if total == 0 {
        return Err(Error::Training("batch has no answer tokens".into()));
    }
    let seed = 1.0 / total as f64;
    let mut acc = GradAccumulator::new(adapter.params().len());
    let mut ce = 0.0;
    let p = adapter.config().dropout;
    for chunk in batch.chunks(micro_batch.max(1)) {
        for s in chunk {
            let dropout = (p > 0.0).then_some(Dropout { p, rng: &mut *rng });
            let mut out = sequence_grads(model, Some(adapter), false, &s.ids, &s.answer_targets(), seed, dropout)?;
            ce += out.ce_sum;
            acc.add(&mut out.grads, &out.adapter);
        }
    }
    let loss = finite_loss(ce / total as f64)?;
    optimizer.step(adapter.params_mut(), acc.sums());
    Ok(loss)
}

/// Trains the adapter on encoded samples; the base stays untouched.
pub fn train_lora(
    model: &LanguageModel,
    adapter: &mut AdapterState,
    samples: &[EncodedSample],
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("empty training corpus".into()));
    }
    check_memory(model, samples, schedule, adapter.parameter_count())?;
    let mut opt = AdamW::new(adapter.params(), schedule.lr, schedule.weight_decay);
    let mut stream = BatchStream::new(samples.len(), schedule.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0xD80F);
    let mut log = TrainLog::default();
    for _ in 0..schedule.steps {
        let batch: Vec<&EncodedSample> = stream
            .take(schedule.batch_size)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        log.losses.push(train_step(
            model,
            adapter,
            &mut opt,
            &batch,
            schedule.micro_batch,
            &mut rng,
        )?);
    }
    Ok(log)
}

/// Next-token training of every base weight on the prompt side of the
/// samples (answers excluded).
pub fn pretrain_base(
    model: &mut LanguageModel,
    samples: &[EncodedSample],
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("empty pretraining corpus".into()));
    }
    check_memory(model, samples, schedule, model.params().element_count())?;
    let mut opt = AdamW::new(model.params(), schedule.lr, schedule.weight_decay);
    let mut stream = BatchStream::new(samples.len(), schedule.seed);
    let mut log = TrainLog::default();
    for _ in 0..schedule.steps {
        let batch = stream.take(schedule.batch_size);
        let targets: Vec<Vec<Option<usize>>> = batch.iter().map(|&i| samples[i].prompt_targets()).collect();
        let total: usize = targets.iter().map(|t| t.iter().flatten().count()).sum();
        if total == 0 {
            return Err(Error::Training("prompts have no targets".into()));
        }
        let mut acc = GradAccumulator::new(model.params().len());
        let mut ce = 0.0;
        for (&i, t) in batch.iter().zip(&targets) {
            let mut out = sequence_grads(model, None, true, &samples[i].ids, t, 1.0 / total as f64, None)?;
            ce += out.ce_sum;
            acc.add(&mut out.grads, &out.base);
        }
        log.losses.push(finite_loss(ce / total as f64)?);
        opt.step(model.params_mut(), acc.sums());
    }
    Ok(log)
}

/// Generation budget for a training corpus: 1.5× its longest answer.
pub fn answer_budget(encoded: &[EncodedSample]) -> usize {
    let longest = encoded.iter().map(EncodedSample::answer_len).max().unwrap_or(0);
    (longest * 3).div_ceil(2)
}

pub struct LmTrainOutput {
    pub model: LanguageModel,
    pub adapter: AdapterState,
    /// 1.5× the longest training answer (EOS included), rounded up.
    pub answer_budget: usize,
    pub pretrain_log: TrainLog,
    pub log: TrainLog,
}

/// Builds the vocabulary and base model for `corpus`, pretrains the base on
/// the prompt text, freezes it and fine-tunes a LoRA adapter.
///
/// `arch` supplies the layer shape; its `vocab_size` is replaced by the
/// built vocabulary and `max_seq_len` is raised if needed so that every
/// prompt plus a generation budget of 1.5× the longest answer fits.
pub fn train_lm(
    corpus: &[InstructionSample],
    arch: &LmConfig,
    motion_vocab_size: usize,
    spelling: MotionSpelling,
    lora: &LoraConfig,
    pretrain: &TrainSchedule,
    schedule: &TrainSchedule,
) -> Result<LmTrainOutput> {
    lora.validate()?;
    let vocab = build_prompt_vocab(corpus, motion_vocab_size, spelling)?;
    let encoded: Vec<EncodedSample> = corpus.iter().map(|s| vocab.encode_sample(s)).collect::<Result<_>>()?;
    let budget = answer_budget(&encoded);
    let needed = encoded.iter().map(|e| e.answer_start + budget).max().unwrap_or(0);
    let config = LmConfig {
        vocab_size: vocab.len(),
        max_seq_len: arch.max_seq_len.max(needed),
        ..arch.clone()
    };
    let mut model = LanguageModel::new(config, vocab, schedule.seed)?;
    let pretrain_log = if pretrain.steps > 0 {
        pretrain_base(&mut model, &encoded, pretrain)?
    } else {
        TrainLog::default()
    };
    let mut adapter = AdapterState::new(lora.clone(), model.config(), schedule.seed ^ 0xA0A0)?;
    let log = train_lora(&model, &mut adapter, &encoded, schedule)?;
    Ok(LmTrainOutput {
        model,
        adapter,
        answer_budget: budget,
        pretrain_log,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::{LoraTarget, Mat};
    use super::*;

    fn encoded(model: &LanguageModel) -> Vec<EncodedSample> {
        samples()
            .iter()
            .map(|s| model.vocab().encode_sample(s).unwrap())
            .collect()
    }

    /// Answer-span cross-entropy summed, straight from the logits.
    fn oracle_ce(model: &LanguageModel, adapter: &AdapterState, s: &EncodedSample) -> f64 {
        let logits = model.forward(Some(adapter), &s.ids).unwrap();
        let mut total = 0.0;
        for t in s.answer_start - 1..s.ids.len() - 1 {
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[s.ids[t + 1]];
        }
        total
    }

    #[test]
    fn schedule_defaults_and_accumulation() {
        let s = TrainSchedule::default();
        assert_eq!((s.lr, s.weight_decay), (3e-3, 0.01));
        assert_eq!(s.accumulation_steps().unwrap(), 64);
        assert!(TrainSchedule {
            micro_batch: 3,
            ..s.clone()
        }
        .accumulation_steps()
        .is_err());
        assert!(TrainSchedule { micro_batch: 0, ..s }.accumulation_steps().is_err());
    }

    #[test]
    fn loss_covers_answer_span_only() {
        let model = tiny_model(1);
        let adapter = active_adapter(&model, 2);
        for s in encoded(&model) {
            let targets = s.answer_targets();
            assert!(targets[..s.answer_start - 1].iter().all(Option::is_none));
            assert_eq!(targets.iter().flatten().count(), s.answer_len());
            let out = sequence_grads(&model, Some(&adapter), false, &s.ids, &targets, 1.0, None).unwrap();
            assert!((out.ce_sum - oracle_ce(&model, &adapter, &s)).abs() < 1e-9);

            // Any prompt content with the same answer contributes nothing
            // beyond what the answer positions see.
            let mut relabeled = targets.clone();
            for t in relabeled.iter_mut().take(s.answer_start - 1) {
                *t = None;
            }
            let again = sequence_grads(&model, Some(&adapter), false, &s.ids, &relabeled, 1.0, None).unwrap();
            assert_eq!(again.ce_sum, out.ce_sum);
            let prompt = s.prompt_targets();
            assert!(prompt[s.answer_start - 1..].iter().all(Option::is_none));
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let model = tiny_model(11);
        let adapter = active_adapter(&model, 12);
        let s = &encoded(&model)[1];
        let targets = s.answer_targets();
        let mut out = sequence_grads(&model, Some(&adapter), false, &s.ids, &targets, 1.0, None).unwrap();
        let mut acc = crate::nn::GradAccumulator::new(adapter.params().len());
        acc.add(&mut out.grads, &out.adapter);
        assert!(out.base.iter().all(|&v| out.grads.get(v).is_none()));
        let h = 1e-5;
        let mut checked = 0;
        for (id, name) in adapter.params().names().iter().enumerate() {
            let grad = acc.sums()[id]
                .clone()
                .unwrap_or_else(|| Mat::zeros(adapter.params().get(id).dim()));
            let (rows, cols) = grad.dim();
            for (i, j) in [(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 3)] {
                let mut plus = adapter.clone();
                plus.params_mut().get_mut(id)[[i, j]] += h;
                let mut minus = adapter.clone();
                minus.params_mut().get_mut(id)[[i, j]] -= h;
                let fd = (oracle_ce(&model, &plus, s) - oracle_ce(&model, &minus, s)) / (2.0 * h);
                let g = grad[[i, j]];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{i},{j}]: analytic {g} vs numeric {fd}");
                checked += 1;
            }
        }
        assert_eq!(checked, 3 * 2 * 2 * LoraTarget::ALL.len());
    }

    #[test]
    fn training_leaves_base_untouched_and_lowers_loss() {
        let model = tiny_model(3);
        let before = model.params().to_pairs();
        let digest = model.digest();
        let mut adapter = AdapterState::new(LoraConfig::default(), model.config(), 4).unwrap();
        let schedule = TrainSchedule {
            steps: 100,
            batch_size: 3,
            micro_batch: 1,
            lr: 1e-2,
            ..TrainSchedule::default()
        };
        let log = train_lora(&model, &mut adapter, &encoded(&model), &schedule).unwrap();
        assert_eq!(log.losses.len(), 100);
        assert!(log.last().unwrap() < log.first().unwrap());
        assert_eq!(model.params().to_pairs(), before);
        assert_eq!(model.digest(), digest);

        let mut again = AdapterState::new(LoraConfig::default(), model.config(), 4).unwrap();
        let log2 = train_lora(&model, &mut again, &encoded(&model), &schedule).unwrap();
        assert_eq!(log2, log);
        assert_eq!(again.params().to_pairs(), adapter.params().to_pairs());
    }

    #[test]
    fn accumulation_matches_one_big_micro_batch() {
        let model = tiny_model(5);
        let data = encoded(&model);
        let batch: Vec<&EncodedSample> = data.iter().collect();
        let run = |micro: usize| {
            let mut adapter = active_adapter(&model, 6);
            let mut opt = AdamW::new(adapter.params(), 1e-2, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = train_step(&model, &mut adapter, &mut opt, &batch, micro, &mut rng).unwrap();
            (loss, adapter.params().to_pairs())
        };
        let (l1, p1) = run(1);
        let (l3, p3) = run(3);
        assert!((l1 - l3).abs() < 1e-12);
        for ((_, a), (_, b)) in p1.iter().zip(&p3) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn memory_budget_is_checked_before_training() {
        let model = tiny_model(1);
        let mut adapter = AdapterState::new(LoraConfig::default(), model.config(), 0).unwrap();
        let before = adapter.params().to_pairs();
        let schedule = TrainSchedule {
            memory_budget_bytes: 1024,
            batch_size: 4,
            ..TrainSchedule::default()
        };
        let err = train_lora(&model, &mut adapter, &encoded(&model), &schedule).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(adapter.params().to_pairs(), before);
    }

    #[test]
    fn budget_is_half_again_the_longest_answer() {
        let model = tiny_model(1);
        let e = encoded(&model);
        // longest answer: 4 codes + EOS
        assert_eq!(e.iter().map(EncodedSample::answer_len).max(), Some(5));
        assert_eq!(answer_budget(&e), 8);
    }
}
