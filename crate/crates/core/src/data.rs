//! Motion-feature corpora: the on-disk dataset layout, normalization
//! statistics and a deterministic synthetic corpus with separable families.
//!
//! Dataset directory layout:
//!
//! ```text
//! motions/<id>.mfa     "MFA1", u32 T, u32 D, then T·D little-endian f32
//! texts/<id>.txt       one caption per line (anything after '#' is ignored)
//! splits/train.txt     one id per line; likewise val.txt and test.txt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const MFA_MAGIC: &[u8; 4] = b"MFA1";
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_FPS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Mat,
    pub fps: f64,
    pub source_id: String,
}

impl MotionSequence {
    pub fn new(frames: Mat, fps: f64, source_id: impl Into<String>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::domain("motion must have at least one frame and one feature"));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("motion contains non-finite values"));
        }
        if !(fps > 0.0) {
            return Err(Error::domain(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            frames,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn into_frames(self) -> Mat {
        self.frames
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Feature width `D`.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Frames `[start, end)` as a new sequence with the same metadata.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::domain(format!(
                "window {start}..{end} out of range for {} frames",
                self.len()
            )));
        }
        Self::new(
            self.frames.slice(ndarray::s![start..end, ..]).to_owned(),
            self.fps,
            self.source_id.clone(),
        )
    }

    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.len()) {
            return Err(Error::domain(format!(
                "position {p} out of range for {} frames",
                self.len()
            )));
        }
        Self::new(self.frames.select(Axis(0), positions), self.fps, self.source_id.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextAnnotation {
    pub text: String,
    pub motion_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Motions with their captions and split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub motions: Vec<MotionSequence>,
    pub annotations: Vec<TextAnnotation>,
    /// Train-split statistics; absent while the train split is empty.
    pub stats: Option<MotionStats>,
    pub splits: BTreeMap<String, Split>,
}

impl Corpus {
    /// Validates annotation references and split coverage, then computes
    /// train-split statistics when possible.
    pub fn new(
        motions: Vec<MotionSequence>,
        annotations: Vec<TextAnnotation>,
        splits: BTreeMap<String, Split>,
    ) -> Result<Self> {
        let ids: BTreeSet<&str> = motions.iter().map(|m| m.source_id.as_str()).collect();
        if ids.len() != motions.len() {
            return Err(Error::domain("duplicate motion ids in corpus"));
        }
        if let Some(first) = motions.first() {
            if let Some(bad) = motions.iter().find(|m| m.dim() != first.dim()) {
                return Err(Error::domain(format!(
                    "motion {} has width {} but corpus width is {}",
                    bad.source_id,
                    bad.dim(),
                    first.dim()
                )));
            }
        }
        for a in &annotations {
            if !ids.contains(a.motion_id.as_str()) {
                return Err(Error::domain(format!(
                    "annotation refers to unknown motion {}",
                    a.motion_id
                )));
            }
            if a.text.trim().is_empty() {
                return Err(Error::domain(format!("empty caption for motion {}", a.motion_id)));
            }
        }
        for m in &motions {
            if !splits.contains_key(&m.source_id) {
                return Err(Error::domain(format!("motion {} has no split", m.source_id)));
            }
        }
        let mut corpus = Self {
            motions,
            annotations,
            stats: None,
            splits,
        };
        if !corpus.split_motions(Split::Train).is_empty() {
            corpus.stats = Some(compute_stats(&corpus)?);
        }
        Ok(corpus)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.motions.first().map(MotionSequence::dim)
    }

    pub fn stats(&self) -> Result<&MotionStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::domain("corpus has no train motions, statistics unavailable"))
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    pub fn split_motions(&self, split: Split) -> Vec<&MotionSequence> {
        self.motions
            .iter()
            .filter(|m| self.splits.get(&m.source_id) == Some(&split))
            .collect()
    }

    pub fn motion(&self, id: &str) -> Option<&MotionSequence> {
        self.motions.iter().find(|m| m.source_id == id)
    }

    pub fn captions(&self, id: &str) -> Vec<&str> {
        self.annotations
            .iter()
            .filter(|a| a.motion_id == id)
            .map(|a| a.text.as_str())
            .collect()
    }

    /// Annotations whose motion belongs to `split`, in corpus order.
    pub fn split_annotations(&self, split: Split) -> Vec<&TextAnnotation> {
        self.annotations
            .iter()
            .filter(|a| self.splits.get(&a.motion_id) == Some(&split))
            .collect()
    }

    /// Reassign splits by a seeded shuffle; statistics follow the new train split.
    pub fn resplit(&mut self, seed: u64, val_fraction: f64, test_fraction: f64) -> Result<()> {
        if !(0.0..1.0).contains(&(val_fraction + test_fraction)) || val_fraction < 0.0 || test_fraction < 0.0 {
            return Err(Error::domain("split fractions must be non-negative and sum below 1"));
        }
        let mut ids: Vec<String> = self.motions.iter().map(|m| m.source_id.clone()).collect();
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = (n as f64 * test_fraction).round() as usize;
        self.splits = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let split = if i < n_val {
                    Split::Val
                } else if i < n_val + n_test {
                    Split::Test
                } else {
                    Split::Train
                };
                (id, split)
            })
            .collect();
        self.stats = if self.split_motions(Split::Train).is_empty() {
            None
        } else {
            Some(compute_stats(self)?)
        };
        Ok(())
    }

    /// Copy of the corpus with every motion normalized by the train statistics.
    pub fn normalized(&self) -> Result<Corpus> {
        let stats = self.stats()?;
        let motions = self
            .motions
            .iter()
            .map(|m| normalize(m, stats))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            motions,
            annotations: self.annotations.clone(),
            stats: self.stats.clone(),
            splits: self.splits.clone(),
        })
    }
}

/// Per-dimension population mean and standard deviation over every frame of
/// the train-split motions; the deviation is floored at [`STD_FLOOR`].
pub fn compute_stats(corpus: &Corpus) -> Result<MotionStats> {
    let train = corpus.split_motions(Split::Train);
    let first = train
        .first()
        .ok_or_else(|| Error::domain("cannot compute statistics of an empty train split"))?;
    let d = first.dim();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for m in &train {
        for row in m.frames().outer_iter() {
            for (s, v) in sum.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        count += m.len();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; d];
    for m in &train {
        for row in m.frames().outer_iter() {
            for ((s, v), mu) in sq.iter_mut().zip(row.iter()).zip(&mean) {
                *s += (v - mu).powi(2);
            }
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(MotionStats { mean, std })
}

fn check_stats(motion: &MotionSequence, stats: &MotionStats) -> Result<()> {
    if stats.mean.len() != motion.dim() || stats.std.len() != motion.dim() {
        return Err(Error::domain(format!(
            "statistics have width {} but motion has width {}",
            stats.mean.len(),
            motion.dim()
        )));
    }
    Ok(())
}

pub fn normalize(motion: &MotionSequence, stats: &MotionStats) -> Result<MotionSequence> {
    check_stats(motion, stats)?;
    let mut frames = motion.frames().clone();
    for mut row in frames.outer_iter_mut() {
        for ((v, mu), sd) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - mu) / sd;
        }
    }
    MotionSequence::new(frames, motion.fps, motion.source_id.clone())
}

pub fn denormalize(motion: &MotionSequence, stats: &MotionStats) -> Result<MotionSequence> {
    check_stats(motion, stats)?;
    let mut frames = motion.frames().clone();
    for mut row in frames.outer_iter_mut() {
        for ((v, mu), sd) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = *v * sd + mu;
        }
    }
    MotionSequence::new(frames, motion.fps, motion.source_id.clone())
}

// ---------------------------------------------------------------------------
// MFA array files

pub fn encode_mfa(frames: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * frames.len());
    out.extend_from_slice(MFA_MAGIC);
    out.extend_from_slice(&(frames.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_mfa(bytes: &[u8]) -> std::result::Result<Mat, String> {
    if bytes.len() < 12 || &bytes[..4] != MFA_MAGIC {
        return Err("missing MFA1 header".into());
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * t * d {
        return Err(format!("header says {t}x{d} but payload has {} bytes", body.len()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Mat::from_shape_vec((t, d), data).map_err(|e| e.to_string())
}

pub fn read_mfa(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mfa(&bytes).map_err(|m| Error::data(path, m))
}

pub fn write_mfa(path: &Path, frames: &Mat) -> Result<()> {
    write_atomic(path, &encode_mfa(frames))
}

// ---------------------------------------------------------------------------
// Dataset directories

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `motions/`, `texts/`, `splits/` with one file per clip.
    #[default]
    Humanml3d,
}

fn read_split_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("missing split file {}", path.display())),
        _ => Error::io(path, e),
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<Corpus> {
    let Layout::Humanml3d = layout;
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let mut splits = BTreeMap::new();
    let mut order = Vec::new();
    for split in Split::ALL {
        let path = root.join("splits").join(format!("{}.txt", split.name()));
        for id in read_split_file(&path)? {
            if let Some(prev) = splits.insert(id.clone(), split) {
                return Err(Error::data(
                    &path,
                    format!("id {id} already listed in split {}", prev.name()),
                ));
            }
            order.push(id);
        }
    }

    let mut motions = Vec::with_capacity(order.len());
    let mut annotations = Vec::new();
    let mut width: Option<(usize, String)> = None;
    for id in &order {
        let mpath = root.join("motions").join(format!("{id}.mfa"));
        let frames = read_mfa(&mpath)?;
        match &width {
            None => width = Some((frames.ncols(), id.clone())),
            Some((d, first)) if *d != frames.ncols() => {
                return Err(Error::data(
                    &mpath,
                    format!("width {} differs from width {d} of {first}", frames.ncols()),
                ));
            }
            _ => {}
        }
        let motion =
            MotionSequence::new(frames, DEFAULT_FPS, id.clone()).map_err(|e| Error::data(&mpath, e.to_string()))?;
        motions.push(motion);

        let tpath = root.join("texts").join(format!("{id}.txt"));
        let text = fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let before = annotations.len();
        for line in text.lines() {
            let caption = line.split('#').next().unwrap_or("").trim();
            if !caption.is_empty() {
                annotations.push(TextAnnotation {
                    text: caption.to_string(),
                    motion_id: id.clone(),
                });
            }
        }
        if annotations.len() == before {
            return Err(Error::data(&tpath, "no captions"));
        }
    }
    Corpus::new(motions, annotations, splits)
}

/// Write a corpus in the dataset layout read by [`load_dataset`].
pub fn export_dataset(corpus: &Corpus, root: &Path) -> Result<()> {
    for sub in ["motions", "texts", "splits"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut split_lists: BTreeMap<Split, Vec<&str>> = BTreeMap::new();
    for m in &corpus.motions {
        write_mfa(&root.join("motions").join(format!("{}.mfa", m.source_id)), m.frames())?;
        let captions = corpus.captions(&m.source_id).join("\n") + "\n";
        write_atomic(
            &root.join("texts").join(format!("{}.txt", m.source_id)),
            captions.as_bytes(),
        )?;
        let split = corpus.split_of(&m.source_id).unwrap_or(Split::Train);
        split_lists.entry(split).or_default().push(&m.source_id);
    }
    for split in Split::ALL {
        let ids = split_lists.get(&split).cloned().unwrap_or_default();
        let mut body = ids.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        write_atomic(
            &root.join("splits").join(format!("{}.txt", split.name())),
            body.as_bytes(),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const KINDS: [&str; 12] = [
    "waves", "spins", "jumps", "kicks", "walks", "bows", "punches", "crouches", "runs", "claps", "swims", "dances",
];

/// Descriptor of one synthetic motion family.
#[derive(Clone, Debug, PartialEq)]
pub struct Family {
    pub index: usize,
    pub kind: &'static str,
    pub fast: bool,
    pub big: bool,
}

impl Family {
    pub fn new(index: usize) -> Self {
        let k = KINDS.len();
        Self {
            index,
            kind: KINDS[index % k],
            fast: (index / k) % 2 == 1,
            big: (index / (2 * k)) % 2 == 1,
        }
    }

    pub fn description(&self) -> String {
        format!(
            "a person {} {} with {} movements",
            self.kind,
            if self.fast { "quickly" } else { "slowly" },
            if self.big { "big" } else { "small" }
        )
    }

    fn frequency(&self) -> f64 {
        let base = 0.4 + 0.08 * (self.index % KINDS.len()) as f64;
        if self.fast {
            base * 2.5
        } else {
            base
        }
    }

    fn amplitude(&self) -> f64 {
        if self.big {
            1.0
        } else {
            0.4
        }
    }
}

pub const MAX_FAMILIES: usize = 4 * KINDS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub feature_dim: usize,
    /// Inclusive range of clip lengths in frames.
    pub length_range: (usize, usize),
    pub n_families: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clips: 64,
            feature_dim: 32,
            length_range: (32, 64),
            n_families: 4,
            val_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

/// Deterministic corpus of family-parameterized sinusoid mixtures. Clip `i`
/// belongs to family `i mod n_families`; every family has its own offset
/// pattern, tempo and amplitude, and a caption naming all three.
pub fn synth_corpus(seed: u64, n_clips: usize, feature_dim: usize, length_range: (usize, usize)) -> Result<Corpus> {
    synth_corpus_with(
        seed,
        &SynthConfig {
            n_clips,
            feature_dim,
            length_range,
            ..SynthConfig::default()
        },
    )
}

pub fn synth_corpus_with(seed: u64, cfg: &SynthConfig) -> Result<Corpus> {
    let (lo, hi) = cfg.length_range;
    if lo > hi {
        return Err(Error::domain(format!("length range ({lo}, {hi}) is inverted")));
    }
    if lo == 0 {
        return Err(Error::domain("clip length must be at least one frame"));
    }
    if cfg.n_clips == 0 {
        return Err(Error::domain("n_clips must be at least 1"));
    }
    if cfg.feature_dim < 2 {
        return Err(Error::domain("feature_dim must be at least 2"));
    }
    if cfg.n_families == 0 || cfg.n_families > MAX_FAMILIES {
        return Err(Error::domain(format!("n_families must be in 1..={MAX_FAMILIES}")));
    }
    let d = cfg.feature_dim;

    // Family geometry depends only on the family index, so every seed draws
    // clips from the same families.
    let patterns: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_families)
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xFA11_0000 + f as u64);
            let offset = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let weight = (0..d).map(|_| rng.random_range(0.5..1.0)).collect();
            (offset, weight)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = cfg.n_clips.to_string().len().max(4);
    let mut motions = Vec::with_capacity(cfg.n_clips);
    let mut annotations = Vec::with_capacity(cfg.n_clips);
    let mut splits = BTreeMap::new();
    for i in 0..cfg.n_clips {
        let family = Family::new(i % cfg.n_families);
        let (offset, weight) = &patterns[family.index];
        let t_len = rng.random_range(lo..=hi);
        let amp = family.amplitude() * rng.random_range(0.9..1.1);
        let freq = family.frequency() * rng.random_range(0.95..1.05);
        let phases: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let frames = Mat::from_shape_fn((t_len, d), |(t, j)| {
            let harmonic = 1.0 + 0.25 * (j % 3) as f64;
            let arg = std::f64::consts::TAU * freq * harmonic * t as f64 / DEFAULT_FPS + phases[j];
            offset[j] + amp * weight[j] * arg.sin()
        });
        let id = format!("clip{:0width$}", i, width = width);
        motions.push(MotionSequence::new(frames, DEFAULT_FPS, id.clone())?);
        annotations.push(TextAnnotation {
            text: family.description(),
            motion_id: id.clone(),
        });
        splits.insert(id, Split::Train);
    }
    let mut corpus = Corpus::new(motions, annotations, splits)?;
    if cfg.val_fraction > 0.0 || cfg.test_fraction > 0.0 {
        corpus.resplit(seed ^ 0x5911_7000, cfg.val_fraction, cfg.test_fraction)?;
    }
    Ok(corpus)
}

/// Family index of a synthetic clip, recovered from its caption.
pub fn family_of_caption(caption: &str, n_families: usize) -> Option<usize> {
    (0..n_families).find(|&f| Family::new(f).description() == caption)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(frames: Vec<f64>, d: usize) -> Corpus {
        let t = frames.len() / d;
        let m = MotionSequence::new(Mat::from_shape_vec((t, d), frames).unwrap(), 20.0, "a").unwrap();
        Corpus::new(
            vec![m],
            vec![TextAnnotation {
                text: "x".into(),
                motion_id: "a".into(),
            }],
            BTreeMap::from([("a".to_string(), Split::Train)]),
        )
        .unwrap()
    }

    #[test]
    fn stats_of_zero_motion_hits_floor() {
        let c = single(vec![0.0; 6], 2);
        let s = compute_stats(&c).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn stats_of_two_frames_use_population_std() {
        let s = compute_stats(&single(vec![0.0, 2.0], 1)).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn stats_of_empty_train_split_is_domain_error() {
        let mut c = single(vec![1.0, 2.0], 1);
        c.splits.insert("a".into(), Split::Test);
        assert!(matches!(compute_stats(&c), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_direct_arithmetic_and_mean_maps_to_zero() {
        let stats = MotionStats {
            mean: vec![1.0, 3.0],
            std: vec![2.0, 0.5],
        };
        let m = MotionSequence::new(
            Mat::from_shape_vec((2, 2), vec![5.0, 3.0, 1.0, 3.0]).unwrap(),
            20.0,
            "x",
        )
        .unwrap();
        let n = normalize(&m, &stats).unwrap();
        assert_eq!(n.frames()[[0, 0]], 2.0);
        assert_eq!(n.frames()[[0, 1]], 0.0);
        assert_eq!(n.frames()[[1, 0]], 0.0);

        let bad = MotionStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(matches!(normalize(&m, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn normalized_corpus_has_unit_stats() {
        let c = synth_corpus(3, 12, 6, (20, 30)).unwrap();
        let n = c.normalized().unwrap();
        let s = compute_stats(&n).unwrap();
        for (m, sd) in s.mean.iter().zip(&s.std) {
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn motion_rejects_non_finite_values() {
        let m = Mat::from_shape_vec((1, 2), vec![0.0, f64::NAN]).unwrap();
        assert!(MotionSequence::new(m, 20.0, "x").is_err());
    }

    #[test]
    fn synth_is_deterministic_and_respects_lengths() {
        let a = synth_corpus(9, 8, 4, (16, 16)).unwrap();
        let b = synth_corpus(9, 8, 4, (16, 16)).unwrap();
        assert_eq!(a, b);
        assert!(a.motions.iter().all(|m| m.len() == 16));
        assert!(matches!(synth_corpus(9, 8, 4, (20, 10)), Err(Error::Domain(_))));
        assert_ne!(a, synth_corpus(10, 8, 4, (16, 16)).unwrap());
    }

    #[test]
    fn resplit_is_disjoint_and_deterministic() {
        let mut a = synth_corpus(1, 40, 4, (8, 12)).unwrap();
        let mut b = a.clone();
        a.resplit(7, 0.1, 0.2).unwrap();
        b.resplit(7, 0.1, 0.2).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.split_motions(Split::Val).len(), 4);
        assert_eq!(a.split_motions(Split::Test).len(), 8);
        assert_eq!(a.split_motions(Split::Train).len(), 28);
    }

    #[test]
    fn mfa_rejects_bad_payload() {
        let mut bytes = encode_mfa(&Mat::zeros((2, 3)));
        assert_eq!(decode_mfa(&bytes).unwrap().dim(), (2, 3));
        bytes.pop();
        assert!(decode_mfa(&bytes).is_err());
        assert!(decode_mfa(b"NOPE").is_err());
    }
}
