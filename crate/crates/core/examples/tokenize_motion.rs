// Train a small VQ-VAE on synthetic clips and round-trip one clip through
// its tokens.

use motion_instruct::data::{normalize, synth_corpus, Split};
use motion_instruct::vqvae::{train_vqvae, VqTrainConfig, VqVaeConfig};

pub fn run_example() -> motion_instruct::Result<()> {
    let corpus = synth_corpus(7, 24, 8, (32, 48))?;
    let config = VqVaeConfig {
        n_codes: 32,
        code_dim: 16,
        hidden: 64,
        ..VqVaeConfig::desk(8)
    };
    let train = VqTrainConfig {
        steps: 300,
        seed: 7,
        ..VqTrainConfig::default()
    };
    let (vq, log) = train_vqvae(&corpus, config, &train)?;
    println!(
        "recon mse {:.4} -> {:.4}, codebook usage {:.0}%",
        log.initial_recon().unwrap_or(f64::NAN),
        log.final_recon().unwrap_or(f64::NAN),
        100.0 * log.usage_fraction()
    );

    let raw = corpus.split_motions(Split::Train)[0];
    let clip = normalize(raw, vq.stats().expect("stats are set by training"))?;
    let tokens = vq.tokenize(&clip)?;
    println!(
        "{} frames -> {} tokens: {:?}",
        clip.len(),
        tokens.len(),
        tokens.indices()
    );
    let back = vq.detokenize(&tokens)?;
    println!("single-clip reconstruction mse {:.4}", vq.reconstruction_mse(&[&clip])?);
    assert_eq!(back.len(), tokens.len() * vq.config().downsample);
    Ok(())
}

fn main() -> motion_instruct::Result<()> {
    run_example()
}
