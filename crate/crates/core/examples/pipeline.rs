// Every stage end to end on a small synthetic corpus, one report per task.

use motion_instruct::config::RunConfig;
use motion_instruct::pipeline::run_pipeline;

pub fn run_example() -> motion_instruct::Result<()> {
    let mut config = RunConfig::default();
    config.data.n_clips = 32;
    config.data.feature_dim = 8;
    config.vqvae.steps = 200;
    config.lm.pretrain.steps = 20;
    config.lm.train.steps = 40;
    config.eval.extractor.steps = 50;

    let out = run_pipeline(&config)?;
    println!(
        "vq recon {:.4}, lm loss {:.3}",
        out.vq_log.final_recon().unwrap_or(f64::NAN),
        out.lm_log.last().unwrap_or(f64::NAN)
    );
    for (task, report) in &out.reports {
        println!(
            "{:>4}: fid {:?} recon {:?} dist {:?} ({} of {} generated)",
            task.name(),
            report.fid,
            report.recon,
            report.dist,
            report.counts.evaluated,
            report.counts.total
        );
    }
    Ok(())
}

fn main() -> motion_instruct::Result<()> {
    run_example()
}
