//! Instruction prompts: task sentences, the motion-token span format, the
//! full fine-tuning template, answer parsing and pose-condition sampling.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, Corpus, MotionSequence, Split};
use crate::error::{Error, Result};
use crate::vqvae::{MotionTokenSeq, VqVae};

pub const PREAMBLE: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";
pub const PREAMBLE_V1: &str = "Human motion can be represented by token indices by VQ-VAE. Below is an instruction that describes human motion generation condition types, paired with an input that provides specific conditions. Write a sequence of tokens matching with given conditions.";

pub const MOTION_OPEN: &str = "<Motion Token>";
pub const MOTION_CLOSE: &str = "</Motion Token>";
pub const INSTRUCTION_MARKER: &str = "### Instruction:";
pub const INPUT_MARKER: &str = "### Input:";
pub const RESPONSE_MARKER: &str = "### Response:";

/// Separator between answer token indices.
pub const ANSWER_SEPARATOR: &str = ", ";

/// Frames given as an initial or last pose condition.
pub const BOUNDARY_CONDITION_FRAMES: usize = 4;
/// Inclusive range of keyframe counts for key-pose conditions.
pub const KEYFRAME_COUNT: (usize, usize) = (12, 20);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "text")]
    TextOnly,
    #[serde(rename = "init")]
    TextInit,
    #[serde(rename = "last")]
    TextLast,
    #[serde(rename = "key")]
    TextKey,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::TextOnly,
        TaskKind::TextInit,
        TaskKind::TextLast,
        TaskKind::TextKey,
    ];

    /// Word naming the pose slot in the task sentence.
    pub fn slot(self) -> Option<&'static str> {
        match self {
            TaskKind::TextOnly => None,
            TaskKind::TextInit => Some("init"),
            TaskKind::TextLast => Some("last"),
            TaskKind::TextKey => Some("key"),
        }
    }

    pub fn name(self) -> &'static str {
        self.slot().unwrap_or("text")
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TaskKind::TextOnly),
            "init" => Ok(TaskKind::TextInit),
            "last" => Ok(TaskKind::TextLast),
            "key" => Ok(TaskKind::TextKey),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected text|init|last|key"
            ))),
        }
    }

    pub fn has_pose(self) -> bool {
        self != TaskKind::TextOnly
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    #[default]
    V0,
    V1,
    V2,
}

impl PromptVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v0" => Ok(PromptVariant::V0),
            "v1" => Ok(PromptVariant::V1),
            "v2" => Ok(PromptVariant::V2),
            other => Err(Error::Config(format!("unknown prompt variant {other:?}"))),
        }
    }

    pub fn preamble(self) -> &'static str {
        match self {
            PromptVariant::V1 => PREAMBLE_V1,
            PromptVariant::V0 | PromptVariant::V2 => PREAMBLE,
        }
    }
}

/// One fine-tuning example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub kind: TaskKind,
    pub instruction: String,
    pub input: String,
    /// Answer token indices as bare comma-separated decimals.
    pub output: String,
    #[serde(default)]
    pub variant: PromptVariant,
    #[serde(default)]
    pub motion_id: String,
    /// Frame positions of the pose condition within the ground truth.
    #[serde(default)]
    pub positions: Vec<usize>,
}

pub fn render_task_prompt(kind: TaskKind, variant: PromptVariant) -> String {
    match (variant, kind.slot()) {
        (PromptVariant::V0, None) => {
            "Generate a sequence of motion tokens matching the following human motion description.".into()
        }
        (PromptVariant::V0, Some(slot)) => format!(
            "Generate a sequence of motion tokens matching the following human motion description given the {slot} pose tokens."
        ),
        (PromptVariant::V1, None) => "Motion description.".into(),
        (PromptVariant::V1, Some(slot)) => format!("Motion description and the {slot} pose tokens."),
        (PromptVariant::V2, None) => "Generate the token sequence of the given human motion description.".into(),
        (PromptVariant::V2, Some(slot)) => format!(
            "Generate the token sequence of the given human motion description under the premise of the given {slot} pose tokens."
        ),
    }
}

pub fn join_indices(indices: &[usize]) -> String {
    indices
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(ANSWER_SEPARATOR)
}

/// `<Motion Token>i, j, …</Motion Token>`
pub fn encode_motion_tokens(indices: &[usize]) -> Result<String> {
    if indices.is_empty() {
        return Err(Error::domain("cannot encode an empty motion token sequence"));
    }
    Ok(format!("{MOTION_OPEN}{}{MOTION_CLOSE}", join_indices(indices)))
}

pub fn build_instruction(
    kind: TaskKind,
    text: &str,
    pose_tokens: Option<&MotionTokenSeq>,
    answer: &MotionTokenSeq,
    variant: PromptVariant,
) -> Result<InstructionSample> {
    let mut sample = build_query(kind, text, pose_tokens, variant)?;
    sample.output = join_indices(answer.indices());
    Ok(sample)
}

/// A sample without an answer, for generation.
pub fn build_query(
    kind: TaskKind,
    text: &str,
    pose_tokens: Option<&MotionTokenSeq>,
    variant: PromptVariant,
) -> Result<InstructionSample> {
    let input = match (kind.has_pose(), pose_tokens) {
        (false, None) => text.to_string(),
        (true, Some(p)) => format!("{text}{}", encode_motion_tokens(p.indices())?),
        (false, Some(_)) => {
            return Err(Error::domain("text-only task must not carry pose tokens"));
        }
        (true, None) => {
            return Err(Error::domain(format!("task {} requires pose tokens", kind.name())));
        }
    };
    Ok(InstructionSample {
        kind,
        instruction: render_task_prompt(kind, variant),
        input,
        output: String::new(),
        variant,
        motion_id: String::new(),
        positions: Vec::new(),
    })
}

/// Preamble, then the instruction, input and response sections.
pub fn render_full_prompt(sample: &InstructionSample, include_answer: bool) -> String {
    let mut s = format!(
        "{}\n\n{INSTRUCTION_MARKER}{}{INPUT_MARKER}{}{RESPONSE_MARKER}",
        sample.variant.preamble(),
        sample.instruction,
        sample.input
    );
    if include_answer {
        s.push_str(&sample.output);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub tokens: MotionTokenSeq,
    /// Parsing stopped at a non-conforming item before the end of the text.
    pub truncated: bool,
}

/// Longest valid prefix of comma/whitespace separated indices. Parsing stops
/// at `</s>`, `<eos>` or the first item that is not a decimal integer.
pub fn parse_motion_answer(text: &str, vocab_size: usize) -> Result<ParsedAnswer> {
    parse_motion_answer_with(text, vocab_size, false)
}

/// With `strict`, any non-conforming item is an error instead of a stop.
pub fn parse_motion_answer_with(text: &str, vocab_size: usize, strict: bool) -> Result<ParsedAnswer> {
    let items = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty());
    let mut out = Vec::new();
    let mut truncated = false;
    for (position, item) in items.enumerate() {
        if item == "</s>" || item == "<eos>" {
            break;
        }
        let conforming = item.bytes().all(|b| b.is_ascii_digit());
        let value = if conforming { item.parse::<usize>().ok() } else { None };
        let Some(v) = value else {
            if strict {
                return Err(Error::Parse {
                    raw: text.to_string(),
                    position,
                    message: format!("non-conforming item {item:?}"),
                });
            }
            truncated = true;
            break;
        };
        if v >= vocab_size {
            return Err(Error::Parse {
                raw: text.to_string(),
                position,
                message: format!("index {v} is outside the vocabulary of size {vocab_size}"),
            });
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            raw: text.to_string(),
            position: 0,
            message: "no motion tokens found".into(),
        });
    }
    Ok(ParsedAnswer {
        tokens: MotionTokenSeq::new(out)?,
        truncated,
    })
}

/// A pose condition drawn from a ground-truth motion.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseCondition {
    /// Ground-truth frames at `positions`.
    pub frames: MotionSequence,
    /// Whole downsample windows covering the condition, in temporal order;
    /// these are what gets tokenized.
    pub token_frames: MotionSequence,
    pub tokens: MotionTokenSeq,
    pub positions: Vec<usize>,
}

/// Initial/last conditions take the first/last four frames of the
/// window-aligned motion; key conditions take 12 to 20 frames at sorted
/// random positions and tokenize the windows that contain them.
pub fn sample_pose_condition(
    gt: &MotionSequence,
    kind: TaskKind,
    rng: &mut impl Rng,
    vqvae: &VqVae,
) -> Result<PoseCondition> {
    let f = vqvae.config().downsample;
    let aligned = (gt.len() / f) * f;
    let n = BOUNDARY_CONDITION_FRAMES;
    let boundary_window = n.div_ceil(f) * f;
    let (positions, windows): (Vec<usize>, Vec<usize>) = match kind {
        TaskKind::TextOnly => {
            return Err(Error::domain("text-only tasks have no pose condition"));
        }
        TaskKind::TextInit | TaskKind::TextLast => {
            if aligned < boundary_window {
                return Err(Error::domain(format!(
                    "motion of {} frames is shorter than the {boundary_window}-frame condition window",
                    gt.len()
                )));
            }
            if kind == TaskKind::TextInit {
                ((0..n).collect(), (0..boundary_window / f).collect())
            } else {
                let first_window = (aligned - boundary_window) / f;
                ((aligned - n..aligned).collect(), (first_window..aligned / f).collect())
            }
        }
        TaskKind::TextKey => {
            let count = rng.random_range(KEYFRAME_COUNT.0..=KEYFRAME_COUNT.1);
            if aligned < count {
                return Err(Error::domain(format!(
                    "motion of {} frames is too short for {count} keyframes",
                    gt.len()
                )));
            }
            let mut positions = sample(rng, aligned, count).into_vec();
            positions.sort_unstable();
            let mut windows: Vec<usize> = positions.iter().map(|p| p / f).collect();
            windows.dedup();
            (positions, windows)
        }
    };
    let rows: Vec<usize> = windows.iter().flat_map(|w| w * f..(w + 1) * f).collect();
    let token_frames = gt.select(&rows)?;
    let tokens = vqvae.tokenize(&token_frames)?;
    Ok(PoseCondition {
        frames: gt.select(&positions)?,
        token_frames,
        tokens,
        positions,
    })
}

/// Instruction samples for every annotation of `split` and every task in
/// `tasks`. Motions are normalized with the VQ-VAE's statistics.
pub fn build_instruction_corpus(
    corpus: &Corpus,
    vqvae: &VqVae,
    split: Split,
    tasks: &[TaskKind],
    variant: PromptVariant,
    rng: &mut impl Rng,
) -> Result<Vec<InstructionSample>> {
    let stats = vqvae
        .stats()
        .ok_or_else(|| Error::domain("VQ-VAE has no normalization statistics"))?;
    let mut out = Vec::new();
    for ann in corpus.split_annotations(split) {
        let raw = corpus
            .motion(&ann.motion_id)
            .ok_or_else(|| Error::domain(format!("unknown motion {}", ann.motion_id)))?;
        let gt = normalize(raw, stats)?;
        let answer = vqvae.tokenize(&gt)?;
        for &kind in tasks {
            let cond = if kind.has_pose() {
                Some(sample_pose_condition(&gt, kind, rng, vqvae)?)
            } else {
                None
            };
            let mut sample = build_instruction(kind, &ann.text, cond.as_ref().map(|c| &c.tokens), &answer, variant)?;
            sample.motion_id = ann.motion_id.clone();
            sample.positions = cond.map(|c| c.positions).unwrap_or_default();
            out.push(sample);
        }
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::Format(e.to_string()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1))))
        .collect()
}
