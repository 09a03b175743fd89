// Fine-tune a LoRA adapter on a handful of text-to-motion samples and
// compare the adapter's size with the frozen base.

use motion_instruct::instruct::{build_instruction, PromptVariant, TaskKind};
use motion_instruct::lm::{train_lm, trainable_ratio, LmConfig, LoraConfig, MotionSpelling, TrainSchedule};
use motion_instruct::vqvae::MotionTokenSeq;

pub fn run_example() -> motion_instruct::Result<()> {
    let data = [
        ("a person walks forward", vec![3, 3, 9, 9, 14]),
        ("someone waves with the right hand", vec![21, 22, 21, 22]),
        ("a figure squats down and stands up", vec![5, 30, 30, 5]),
        ("a person turns around slowly", vec![8, 16, 24, 31]),
    ];
    let samples = data
        .iter()
        .map(|(text, tokens)| {
            build_instruction(
                TaskKind::TextOnly,
                text,
                None,
                &MotionTokenSeq::new(tokens.clone())?,
                PromptVariant::V0,
            )
        })
        .collect::<motion_instruct::Result<Vec<_>>>()?;

    let schedule = TrainSchedule {
        steps: 60,
        batch_size: 4,
        micro_batch: 2,
        ..TrainSchedule::default()
    };
    let pretrain = TrainSchedule {
        steps: 20,
        ..schedule.clone()
    };
    let lora = LoraConfig {
        r: 4,
        alpha: 8.0,
        ..LoraConfig::default()
    };
    let out = train_lm(
        &samples,
        &LmConfig::small(0, 0),
        32,
        MotionSpelling::Atomic,
        &lora,
        &pretrain,
        &schedule,
    )?;

    println!(
        "base {} parameters, adapter {} ({:.2}%)",
        out.model.config().parameter_count(),
        out.adapter.parameter_count(),
        100.0 * trainable_ratio(&out.adapter, out.model.config())
    );
    println!(
        "answer cross-entropy {:.3} -> {:.3} over {} steps",
        out.log.first().unwrap_or(f64::NAN),
        out.log.last().unwrap_or(f64::NAN),
        out.log.losses.len()
    );
    Ok(())
}

fn main() -> motion_instruct::Result<()> {
    run_example()
}
