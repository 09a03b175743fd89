//! Word-level vocabulary with one atomic token per motion code.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::{
    render_full_prompt, InstructionSample, INPUT_MARKER, INSTRUCTION_MARKER, MOTION_CLOSE, MOTION_OPEN, RESPONSE_MARKER,
};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Structural tokens, in id order after the motion block.
pub const STRUCTURAL: [&str; 9] = [
    BOS,
    EOS,
    PAD,
    UNK,
    MOTION_OPEN,
    MOTION_CLOSE,
    INSTRUCTION_MARKER,
    INPUT_MARKER,
    RESPONSE_MARKER,
];

const MARKERS: [&str; 5] = [
    MOTION_OPEN,
    MOTION_CLOSE,
    INSTRUCTION_MARKER,
    INPUT_MARKER,
    RESPONSE_MARKER,
];

/// How motion indices are spelled in token space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionSpelling {
    /// One token `⟨M:k⟩` per index; separators are implicit.
    #[default]
    Atomic,
    /// Decimal digits and commas as ordinary text tokens.
    Digits,
}

/// Pieces of text: words, digit runs, single punctuation marks and the
/// section/motion markers.
pub fn scan_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    'outer: while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        for m in MARKERS {
            if rest.starts_with(m) {
                out.push(&rest[..m.len()]);
                rest = &rest[m.len()..];
                continue 'outer;
            }
        }
        let len = if c.is_alphabetic() {
            rest.find(|ch: char| !ch.is_alphabetic()).unwrap_or(rest.len())
        } else if c.is_ascii_digit() {
            rest.find(|ch: char| !ch.is_ascii_digit()).unwrap_or(rest.len())
        } else {
            c.len_utf8()
        };
        out.push(&rest[..len]);
        rest = &rest[len..];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabRepr", try_from = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    motion_size: usize,
    spelling: MotionSpelling,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    motion_size: usize,
    spelling: MotionSpelling,
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            words: v.words,
            motion_size: v.motion_size,
            spelling: v.spelling,
        }
    }
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::from_parts(r.words, r.motion_size, r.spelling)
    }
}

/// Vocabulary over the instruction and input fields of `corpus`.
pub fn build_vocab(corpus: &[InstructionSample], motion_vocab_size: usize) -> Result<Vocabulary> {
    build_vocab_with(corpus, motion_vocab_size, &[], MotionSpelling::Atomic)
}

/// Like [`build_vocab`], also scanning `extra_texts` (for example the
/// preambles of the prompt variants in use).
pub fn build_vocab_with(
    corpus: &[InstructionSample],
    motion_vocab_size: usize,
    extra_texts: &[&str],
    spelling: MotionSpelling,
) -> Result<Vocabulary> {
    if motion_vocab_size == 0 {
        return Err(Error::domain("motion vocabulary size must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::domain("cannot build a vocabulary from an empty corpus"));
    }
    let mut words = BTreeSet::new();
    let texts = corpus
        .iter()
        .flat_map(|s| [s.instruction.as_str(), s.input.as_str()])
        .chain(extra_texts.iter().copied());
    for text in texts {
        let mut in_span = false;
        for w in scan_words(text) {
            match w {
                MOTION_OPEN => in_span = true,
                MOTION_CLOSE => in_span = false,
                _ if MARKERS.contains(&w) => {}
                _ if in_span && spelling == MotionSpelling::Atomic => {}
                _ => {
                    words.insert(w.to_string());
                }
            }
        }
    }
    if spelling == MotionSpelling::Digits {
        words.extend((0..10).map(|d| d.to_string()));
        words.insert(",".into());
    }
    Vocabulary::from_parts(words.into_iter().collect(), motion_vocab_size, spelling)
}

/// Vocabulary for full rendered prompts: the corpus fields plus the
/// preamble of every prompt variant present.
pub fn build_prompt_vocab(
    corpus: &[InstructionSample],
    motion_vocab_size: usize,
    spelling: MotionSpelling,
) -> Result<Vocabulary> {
    let preambles: BTreeSet<&str> = corpus.iter().map(|s| s.variant.preamble()).collect();
    let preambles: Vec<&str> = preambles.into_iter().collect();
    build_vocab_with(corpus, motion_vocab_size, &preambles, spelling)
}

/// Token ids of one training example and where its answer starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub ids: Vec<usize>,
    /// Index of the first answer id; everything from here on (including the
    /// trailing EOS) is supervised.
    pub answer_start: usize,
}

impl EncodedSample {
    /// Next-token targets restricted to the answer span.
    pub fn answer_targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|t| {
                let next = t + 1;
                (next >= self.answer_start && next < self.ids.len()).then(|| self.ids[next])
            })
            .collect()
    }

    /// Next-token targets over the prompt only.
    pub fn prompt_targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|t| (t + 1 < self.answer_start).then(|| self.ids[t + 1]))
            .collect()
    }

    pub fn answer_len(&self) -> usize {
        self.ids.len() - self.answer_start
    }
}

impl Vocabulary {
    fn from_parts(words: Vec<String>, motion_size: usize, spelling: MotionSpelling) -> Result<Self> {
        if motion_size == 0 {
            return Err(Error::domain("motion vocabulary size must be positive"));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if STRUCTURAL.contains(&w.as_str()) || index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("invalid or duplicate vocabulary word {w:?}")));
            }
        }
        let base = words.len() + motion_size;
        for (i, s) in STRUCTURAL.iter().enumerate() {
            index.insert((*s).to_string(), base + i);
        }
        Ok(Self {
            words,
            motion_size,
            spelling,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.motion_size + STRUCTURAL.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn text_len(&self) -> usize {
        self.words.len()
    }

    pub fn motion_size(&self) -> usize {
        self.motion_size
    }

    pub fn spelling(&self) -> MotionSpelling {
        self.spelling
    }

    pub fn motion_id(&self, code: usize) -> usize {
        debug_assert!(code < self.motion_size);
        self.words.len() + code
    }

    /// Motion code of `id` when it lies in the motion block.
    pub fn motion_code(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.words.len()).filter(|&c| c < self.motion_size)
    }

    pub fn structural(&self, token: &str) -> usize {
        self.index[token]
    }

    pub fn bos(&self) -> usize {
        self.structural(BOS)
    }

    pub fn eos(&self) -> usize {
        self.structural(EOS)
    }

    pub fn unk(&self) -> usize {
        self.structural(UNK)
    }

    /// Id of a text word, falling back to UNK.
    pub fn word_id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: usize) -> String {
        let w = self.words.len();
        if id < w {
            self.words[id].clone()
        } else if id < w + self.motion_size {
            format!("⟨M:{}⟩", id - w)
        } else {
            STRUCTURAL
                .get(id - w - self.motion_size)
                .map(|s| s.to_string())
                .unwrap_or_else(|| UNK.into())
        }
    }

    fn push_indices(&self, digits: &str, out: &mut Vec<usize>) -> Result<()> {
        for item in digits.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match self.spelling {
                MotionSpelling::Atomic => {
                    let code: usize = item
                        .parse()
                        .map_err(|_| Error::domain(format!("motion index {item:?} is not a number")))?;
                    if code >= self.motion_size {
                        return Err(Error::domain(format!(
                            "motion index {code} exceeds vocabulary size {}",
                            self.motion_size
                        )));
                    }
                    out.push(self.motion_id(code));
                }
                MotionSpelling::Digits => {
                    if self.last_was_digit(out) {
                        out.push(self.word_id(","));
                    }
                    let mut buf = [0u8; 4];
                    out.extend(item.chars().map(|c| self.word_id(c.encode_utf8(&mut buf))));
                }
            }
        }
        Ok(())
    }

    fn last_was_digit(&self, out: &[usize]) -> bool {
        out.last()
            .map(|&id| self.token(id).bytes().all(|b| b.is_ascii_digit()))
            .unwrap_or(false)
    }

    /// Ids for rendered prompt text; indices inside motion spans become
    /// motion tokens.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find(MOTION_OPEN) {
            out.extend(scan_words(&rest[..open]).into_iter().map(|w| self.word_id(w)));
            let after = &rest[open + MOTION_OPEN.len()..];
            let close = after
                .find(MOTION_CLOSE)
                .ok_or_else(|| Error::domain("unterminated motion token span"))?;
            out.push(self.structural(MOTION_OPEN));
            let mut span = Vec::new();
            self.push_indices(&after[..close], &mut span)?;
            out.extend(span);
            out.push(self.structural(MOTION_CLOSE));
            rest = &after[close + MOTION_CLOSE.len()..];
        }
        out.extend(scan_words(rest).into_iter().map(|w| self.word_id(w)));
        Ok(out)
    }

    /// Ids of an answer string of comma-separated indices.
    pub fn encode_answer(&self, answer: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        self.push_indices(answer, &mut out)?;
        if out.is_empty() {
            return Err(Error::domain("empty answer"));
        }
        Ok(out)
    }

    /// BOS, prompt, answer, EOS.
    pub fn encode_sample(&self, sample: &InstructionSample) -> Result<EncodedSample> {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode_text(&render_full_prompt(sample, false))?);
        let answer_start = ids.len();
        ids.extend(self.encode_answer(&sample.output)?);
        ids.push(self.eos());
        Ok(EncodedSample { ids, answer_start })
    }

    /// BOS followed by the prompt, ready for generation.
    pub fn encode_prompt(&self, sample: &InstructionSample) -> Result<Vec<usize>> {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode_text(&render_full_prompt(sample, false))?);
        Ok(ids)
    }

    /// Text of generated answer ids. Motion tokens become decimal indices
    /// joined by `", "`; anything else is spelled out.
    pub fn decode_answer(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let mut prev_number = false;
        for &id in ids {
            let (piece, number) = match (self.spelling, self.motion_code(id)) {
                (MotionSpelling::Atomic, Some(code)) => (code.to_string(), true),
                _ => {
                    let t = self.token(id);
                    let number = t.bytes().all(|b| b.is_ascii_digit());
                    (t, number)
                }
            };
            match self.spelling {
                MotionSpelling::Atomic => {
                    if !s.is_empty() {
                        s.push_str(if prev_number && number { ", " } else { " " });
                    }
                }
                MotionSpelling::Digits => {
                    if piece == "," {
                        s.push_str(", ");
                        prev_number = false;
                        continue;
                    }
                    if !s.is_empty() && !s.ends_with(' ') && !(prev_number && number) {
                        s.push(' ');
                    }
                }
            }
            s.push_str(&piece);
            prev_number = number;
        }
        s
    }

    /// Text words in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn to_map(&self) -> BTreeMap<usize, String> {
        (0..self.len()).map(|i| (i, self.token(i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruct::{PromptVariant, TaskKind};

    fn sample(instruction: &str, input: &str, output: &str) -> InstructionSample {
        InstructionSample {
            kind: TaskKind::TextOnly,
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            variant: PromptVariant::V0,
            motion_id: String::new(),
            positions: vec![],
        }
    }

    #[test]
    fn vocab_size_counts_words_motion_and_structural() {
        let v = build_vocab(&[sample("a person", "walks", "0, 1")], 4).unwrap();
        assert_eq!(v.len(), 3 + 4 + STRUCTURAL.len());
        assert_eq!(v.words(), &["a", "person", "walks"]);
        assert_eq!(v.motion_id(0), 3);
        assert_eq!(v.motion_code(6), Some(3));
        assert_eq!(v.motion_code(7), None);
        assert!(build_vocab(&[], 4).is_err());
        assert!(build_vocab(&[sample("a", "b", "0")], 0).is_err());
    }

    #[test]
    fn scanner_splits_markers_words_and_punctuation() {
        assert_eq!(
            scan_words("### Input:a person walks.<Motion Token>3, 4</Motion Token>"),
            vec![
                "### Input:",
                "a",
                "person",
                "walks",
                ".",
                "<Motion Token>",
                "3",
                ",",
                "4",
                "</Motion Token>"
            ]
        );
    }

    #[test]
    fn encode_sample_marks_answer_span() {
        let s = sample("walk", "a person walks<Motion Token>2</Motion Token>", "1, 3");
        let v = build_prompt_vocab(std::slice::from_ref(&s), 4, MotionSpelling::Atomic).unwrap();
        let enc = v.encode_sample(&s).unwrap();
        assert_eq!(enc.answer_len(), 3);
        assert_eq!(&enc.ids[enc.answer_start..], &[v.motion_id(1), v.motion_id(3), v.eos()]);
        assert!(!enc.ids[..enc.answer_start].contains(&v.unk()));
        assert!(enc.ids.contains(&v.motion_id(2)));
        let targets = enc.answer_targets();
        assert_eq!(targets.iter().filter(|t| t.is_some()).count(), 3);
        assert_eq!(v.decode_answer(&enc.ids[enc.answer_start..]), "1, 3 </s>");
    }

    #[test]
    fn digit_spelling_round_trips_answer() {
        let s = sample("walk", "a person walks", "12, 3");
        let v = build_prompt_vocab(std::slice::from_ref(&s), 16, MotionSpelling::Digits).unwrap();
        let ids = v.encode_answer("12, 3").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(v.decode_answer(&ids), "12, 3");
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab(&[sample("a person", "walks", "0")], 4).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.word_id("walks"), v.word_id("walks"));
        assert_eq!(back.word_id("dances"), v.unk());
    }
}
