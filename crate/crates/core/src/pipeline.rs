//! End-to-end runs: data, both training stages, generation and evaluation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Stage};
use crate::data::{load_dataset, synth_corpus_with, Corpus, Layout, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, pairs_from_batch, train_bi_encoder, EvalReport, ExtractorConfig, FeatureExtractor};
use crate::generate::{batch_generate, BatchOutput, Models};
use crate::instruct::{build_instruction_corpus, InstructionSample, TaskKind};
use crate::lm::{train_lm, train_lora, AdapterState, EncodedSample, LanguageModel, LmTrainOutput, TrainSchedule};
use crate::vqvae::{train_vqvae, VqTrainLog, VqVae};

/// The dataset directory from the config, or the seeded synthetic corpus.
pub fn load_corpus(config: &RunConfig) -> Result<Corpus> {
    match &config.paths.data {
        Some(dir) => load_dataset(dir, Layout::Humanml3d),
        None => synth_corpus_with(config.stage_seed(Stage::Data), &config.data),
    }
}

pub fn train_tokenizer(config: &RunConfig, corpus: &Corpus) -> Result<(VqVae, VqTrainLog)> {
    let dim = corpus.feature_dim().ok_or_else(|| Error::domain("empty corpus"))?;
    train_vqvae(
        corpus,
        config.vqvae.model(dim),
        &config.vqvae.training(config.stage_seed(Stage::VqVae)),
    )
}

/// Train-split instruction samples for `tasks`.
pub fn instructions(
    config: &RunConfig,
    corpus: &Corpus,
    vqvae: &VqVae,
    tasks: &[TaskKind],
) -> Result<Vec<InstructionSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed(Stage::Instructions));
    build_instruction_corpus(corpus, vqvae, Split::Train, tasks, config.lm.variant, &mut rng)
}

fn schedule(base: &TrainSchedule, seed: u64) -> TrainSchedule {
    TrainSchedule { seed, ..base.clone() }
}

/// Pretrained base plus an adapter fine-tuned on `samples`.
pub fn train_language_model(
    config: &RunConfig,
    samples: &[InstructionSample],
    n_codes: usize,
) -> Result<LmTrainOutput> {
    train_lm(
        samples,
        &config.lm.arch(),
        n_codes,
        config.lm.spelling,
        &config.lm.lora,
        &schedule(&config.lm.pretrain, config.stage_seed(Stage::Pretrain)),
        &schedule(&config.lm.train, config.stage_seed(Stage::Lora)),
    )
}

/// A fresh adapter on an existing frozen base.
pub fn train_adapter(config: &RunConfig, model: &LanguageModel, samples: &[InstructionSample]) -> Result<AdapterState> {
    let encoded: Vec<EncodedSample> = samples
        .iter()
        .map(|s| model.vocab().encode_sample(s))
        .collect::<Result<_>>()?;
    let seed = config.stage_seed(Stage::Lora);
    let mut adapter = AdapterState::new(config.lm.lora.clone(), model.config(), seed ^ 0xA0A0)?;
    train_lora(model, &mut adapter, &encoded, &schedule(&config.lm.train, seed))?;
    Ok(adapter)
}

pub fn train_extractor(config: &RunConfig, corpus: &Corpus) -> Result<FeatureExtractor> {
    let cfg = ExtractorConfig {
        seed: config.stage_seed(Stage::Extractor),
        ..config.eval.extractor.clone()
    };
    train_bi_encoder(corpus, &cfg)
}

/// Generation on the evaluation split for one task, then its report.
pub fn evaluate_task(
    config: &RunConfig,
    corpus: &Corpus,
    models: &Models,
    extractor: &FeatureExtractor,
    task: TaskKind,
    budget: usize,
) -> Result<(BatchOutput, EvalReport)> {
    let sampling = config.eval.sampling_config(budget, config.stage_seed(Stage::Sampling));
    let batch = batch_generate(
        corpus,
        config.eval.split,
        task,
        models,
        &sampling,
        config.stage_seed(Stage::Conditions),
    )?;
    let metrics = crate::eval::EvalConfig {
        seed: config.stage_seed(Stage::Metrics),
        downsample: config.vqvae.downsample,
        ..config.eval.metrics.clone()
    };
    let report = evaluate(&pairs_from_batch(&batch), extractor, &metrics, Some(&sampling))?;
    Ok((batch, report))
}

pub struct PipelineOutput {
    pub corpus: Corpus,
    pub vq_log: VqTrainLog,
    pub models: Models,
    pub lm_log: crate::lm::TrainLog,
    pub pretrain_log: crate::lm::TrainLog,
    pub answer_budget: usize,
    pub extractor: FeatureExtractor,
    pub reports: BTreeMap<TaskKind, EvalReport>,
}

/// Every stage in order, one report per configured task.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let corpus = load_corpus(config)?;
    let (vqvae, vq_log) = train_tokenizer(config, &corpus)?;
    let samples = instructions(config, &corpus, &vqvae, &config.lm.tasks)?;
    let lm = train_language_model(config, &samples, vqvae.config().n_codes)?;
    let extractor = train_extractor(config, &corpus)?;
    let models = Models {
        vqvae,
        lm: lm.model,
        adapter: Some(lm.adapter),
        variant: config.lm.variant,
    };
    let mut reports = BTreeMap::new();
    for &task in &config.lm.tasks {
        let (_, report) = evaluate_task(config, &corpus, &models, &extractor, task, lm.answer_budget)?;
        reports.insert(task, report);
    }
    Ok(PipelineOutput {
        corpus,
        vq_log,
        models,
        lm_log: lm.log,
        pretrain_log: lm.pretrain_log,
        answer_budget: lm.answer_budget,
        extractor,
        reports,
    })
}
