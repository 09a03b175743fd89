// The evaluation metrics on hand-made features and motions, and retrieval
// with a trained bi-encoder.

use motion_instruct::autodiff::Mat;
use motion_instruct::data::{normalize, synth_corpus_with, MotionSequence, Split, SynthConfig};
use motion_instruct::eval::{
    diversity, fid, key_dist, mm_dist, r_precision, recon_loss, train_bi_encoder, ExtractorConfig,
};

pub fn run_example() -> motion_instruct::Result<()> {
    let real = Mat::from_shape_fn((200, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0);
    let shifted = &real + 0.5;
    println!("fid(real, real) {:.2e}", fid(&real, &real)?);
    println!("fid(real, real + 0.5) {:.4}", fid(&real, &shifted)?);
    println!(
        "mm dist {:.4}, diversity {:.4}",
        mm_dist(&real, &shifted)?,
        diversity(&real, 50, 0)?
    );

    let gen = MotionSequence::new(Mat::from_shape_fn((16, 2), |(t, j)| (t + j) as f64), 20.0, "gen")?;
    let keys = gen.select(&[2, 9])?;
    println!("key dist to own frames {}", key_dist(&gen, &keys)?);
    println!(
        "recon at the first frames {}",
        recon_loss(&gen, &gen.window(0, 4)?, &[0, 1, 2, 3])?
    );

    let corpus = synth_corpus_with(
        4,
        &SynthConfig {
            n_clips: 48,
            n_families: 6,
            feature_dim: 8,
            val_fraction: 0.25,
            ..SynthConfig::default()
        },
    )?;
    let extractor = train_bi_encoder(
        &corpus,
        &ExtractorConfig {
            steps: 150,
            ..ExtractorConfig::default()
        },
    )?;
    let val = corpus.split_annotations(Split::Val);
    let motions = val
        .iter()
        .map(|a| normalize(corpus.motion(&a.motion_id).expect("annotated clip"), extractor.stats()))
        .collect::<motion_instruct::Result<Vec<_>>>()?;
    let refs: Vec<&MotionSequence> = motions.iter().collect();
    let texts: Vec<&str> = val.iter().map(|a| a.text.as_str()).collect();
    let rp = r_precision(
        &extractor.motion_features(&refs)?,
        &extractor.text_features(&texts),
        val.len(),
        3,
        0,
    )?;
    println!(
        "ground-truth retrieval top-1/2/3 {:.2} {:.2} {:.2}",
        rp[0], rp[1], rp[2]
    );
    Ok(())
}

fn main() -> motion_instruct::Result<()> {
    run_example()
}
