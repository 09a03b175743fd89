// Render the prompt for every task kind and prompt variant, then parse a
// model-style answer back into tokens.

use motion_instruct::instruct::{build_instruction, parse_motion_answer, render_full_prompt, PromptVariant, TaskKind};
use motion_instruct::vqvae::MotionTokenSeq;

pub fn run_example() -> motion_instruct::Result<()> {
    let pose = MotionTokenSeq::new(vec![12, 40])?;
    let answer = MotionTokenSeq::new(vec![12, 40, 40, 7, 3])?;
    for variant in [PromptVariant::V0, PromptVariant::V1, PromptVariant::V2] {
        for kind in TaskKind::ALL {
            let cond = kind.has_pose().then_some(&pose);
            let sample = build_instruction(kind, "a person jogs in place", cond, &answer, variant)?;
            println!(
                "--- {variant:?} {}\n{}\n",
                kind.name(),
                render_full_prompt(&sample, true)
            );
        }
    }

    // generation can run past the answer; parsing keeps the valid prefix
    let parsed = parse_motion_answer("12, 40, 40, 7, 3, walk</s>", 64)?;
    println!("parsed {:?} truncated={}", parsed.tokens.indices(), parsed.truncated);
    assert_eq!(parsed.tokens, answer);
    Ok(())
}

fn main() -> motion_instruct::Result<()> {
    run_example()
}
