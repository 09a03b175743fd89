// Text-only and initial-pose generation with greedy and top-k decoding.

use motion_instruct::config::RunConfig;
use motion_instruct::data::{normalize, Split};
use motion_instruct::generate::{generate_motion, Models, SamplingConfig};
use motion_instruct::instruct::TaskKind;
use motion_instruct::pipeline::{instructions, load_corpus, train_language_model, train_tokenizer};

pub fn run_example() -> motion_instruct::Result<()> {
    let mut config = RunConfig::default();
    config.data.n_clips = 24;
    config.data.feature_dim = 8;
    config.vqvae.steps = 200;
    config.lm.pretrain.steps = 20;
    config.lm.train.steps = 40;

    let corpus = load_corpus(&config)?;
    let (vqvae, _) = train_tokenizer(&config, &corpus)?;
    let samples = instructions(&config, &corpus, &vqvae, &config.lm.tasks)?;
    let lm = train_language_model(&config, &samples, vqvae.config().n_codes)?;
    let models = Models {
        vqvae,
        lm: lm.model,
        adapter: Some(lm.adapter),
        variant: config.lm.variant,
    };

    let ann = corpus.split_annotations(Split::Val)[0];
    let gt = normalize(corpus.motion(&ann.motion_id).expect("annotated clip"), corpus.stats()?)?;
    let init = gt.window(0, 4)?;
    let requests = [
        (TaskKind::TextOnly, None, SamplingConfig::greedy(lm.answer_budget)),
        (
            TaskKind::TextInit,
            Some(&init),
            SamplingConfig::greedy(lm.answer_budget),
        ),
        (TaskKind::TextOnly, None, SamplingConfig::top_k(lm.answer_budget, 1)),
    ];
    for (task, cond, sampling) in requests {
        match generate_motion(task, &ann.text, cond, &models, &sampling) {
            Ok(r) => println!(
                "{} {:?}: {} tokens, {} frames, stop {:?}",
                task.name(),
                sampling.mode,
                r.tokens.len(),
                r.motion.len(),
                r.stop_reason
            ),
            // a barely trained model may not produce a parsable answer
            Err(e) => println!("{} {:?}: {e}", task.name(), sampling.mode),
        }
    }
    Ok(())
}

fn main() -> motion_instruct::Result<()> {
    run_example()
}
