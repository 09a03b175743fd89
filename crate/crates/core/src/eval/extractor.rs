//! Contrastive text/motion bi-encoder that supplies evaluation features.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::checkpoint::{Container, EXTRACTOR_MAGIC};
use crate::data::{normalize, Corpus, MotionSequence, MotionStats, Split};
use crate::error::{Error, Result};
use crate::lm::scan_words;
use crate::nn::{linear, linear_weight, normal_matrix, AdamW, GradAccumulator, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Output width `F` of both branches.
    pub feature_dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
    /// Distinct captions per contrastive batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden: 64,
            temperature: 0.1,
            steps: 400,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Lowercased words of a caption, punctuation dropped.
fn caption_words(text: &str) -> Vec<String> {
    scan_words(text)
        .into_iter()
        .filter(|w| w.chars().all(char::is_alphanumeric))
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    motion_dim: usize,
    words: BTreeMap<String, usize>,
    stats: MotionStats,
    params: ParamSet,
    /// Where the weights came from, e.g. the training corpus digest.
    pub provenance: String,
}

struct Bound {
    vars: Vec<Var>,
}

const NAMES: [&str; 13] = [
    "word_emb", "t1.w", "t1.b", "t2.w", "t2.b", "m0.w", "m0.b", "m1.w", "m1.b", "m2.w", "m2.b", "m3.w", "m3.b",
];

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[NAMES.iter().position(|n| *n == name).expect("known parameter")]
    }
}

impl FeatureExtractor {
    fn new(config: ExtractorConfig, motion_dim: usize, words: BTreeMap<String, usize>, stats: MotionStats) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (h, f) = (config.hidden, config.feature_dim);
        let mut p = ParamSet::new();
        p.insert("word_emb", normal_matrix(words.len().max(1), h, 1.0, &mut rng));
        p.insert("t1.w", linear_weight(h, h, &mut rng));
        p.insert("t1.b", Mat::zeros((1, h)));
        p.insert("t2.w", linear_weight(f, h, &mut rng));
        p.insert("t2.b", Mat::zeros((1, f)));
        p.insert("m0.w", linear_weight(h, 2 * motion_dim, &mut rng));
        p.insert("m0.b", Mat::zeros((1, h)));
        p.insert("m1.w", linear_weight(h, h, &mut rng));
        p.insert("m1.b", Mat::zeros((1, h)));
        p.insert("m2.w", linear_weight(h, h, &mut rng));
        p.insert("m2.b", Mat::zeros((1, h)));
        p.insert("m3.w", linear_weight(f, h, &mut rng));
        p.insert("m3.b", Mat::zeros((1, f)));
        Self {
            config,
            motion_dim,
            words,
            stats,
            params: p,
            provenance: String::new(),
        }
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Statistics the motion branch normalizes raw motions with.
    pub fn stats(&self) -> &MotionStats {
        &self.stats
    }

    fn text_graph(&self, g: &mut Graph, b: &Bound, text: &str) -> Var {
        let ids: Vec<usize> = caption_words(text)
            .iter()
            .filter_map(|w| self.words.get(w).copied())
            .collect();
        let pooled = if ids.is_empty() {
            g.constant(Mat::zeros((1, self.config.hidden)))
        } else {
            let e = g.gather(b.get("word_emb"), &ids);
            g.mean_rows(e)
        };
        let h = linear(g, pooled, b.get("t1.w"), Some(b.get("t1.b")));
        let h = g.relu(h);
        let out = linear(g, h, b.get("t2.w"), Some(b.get("t2.b")));
        g.l2_normalize_rows(out)
    }

    /// Rows `[x_t, x_{t+1} - x_t]`; a single frame gets a zero velocity.
    fn motion_inputs(motion: &MotionSequence) -> Mat {
        let x = motion.frames();
        let (t, d) = x.dim();
        let rows = (t - 1).max(1);
        Mat::from_shape_fn((rows, 2 * d), |(i, j)| {
            if j < d {
                x[[i, j]]
            } else if t > 1 {
                x[[i + 1, j - d]] - x[[i, j - d]]
            } else {
                0.0
            }
        })
    }

    fn motion_graph(&self, g: &mut Graph, b: &Bound, motion: &MotionSequence) -> Var {
        let x = g.constant(Self::motion_inputs(motion));
        let h = linear(g, x, b.get("m0.w"), Some(b.get("m0.b")));
        let h = g.relu(h);
        let h = linear(g, h, b.get("m1.w"), Some(b.get("m1.b")));
        let h = g.relu(h);
        let pooled = g.mean_rows(h);
        let h = linear(g, pooled, b.get("m2.w"), Some(b.get("m2.b")));
        let h = g.relu(h);
        let out = linear(g, h, b.get("m3.w"), Some(b.get("m3.b")));
        g.l2_normalize_rows(out)
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.params.bind(g, trainable),
        }
    }

    /// Features of normalized motions, one row each.
    pub fn motion_features(&self, motions: &[&MotionSequence]) -> Result<Mat> {
        let mut out = Mat::zeros((motions.len(), self.feature_dim()));
        for (i, m) in motions.iter().enumerate() {
            if m.dim() != self.motion_dim {
                return Err(Error::domain(format!(
                    "motion width {} does not match the extractor's {}",
                    m.dim(),
                    self.motion_dim
                )));
            }
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let v = self.motion_graph(&mut g, &b, m);
            out.row_mut(i).assign(&g.value(v).row(0));
        }
        Ok(out)
    }

    pub fn text_features(&self, texts: &[&str]) -> Mat {
        let mut out = Mat::zeros((texts.len(), self.feature_dim()));
        for (i, t) in texts.iter().enumerate() {
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let v = self.text_graph(&mut g, &b, t);
            out.row_mut(i).assign(&g.value(v).row(0));
        }
        out
    }

    pub fn to_container(&self) -> Container {
        Container::new(
            serde_json::json!({
                "config": self.config,
                "motion_dim": self.motion_dim,
                "words": self.words.keys().collect::<Vec<_>>(),
                "stats": self.stats,
                "provenance": self.provenance,
            }),
            self.params.to_pairs(),
        )
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config: ExtractorConfig = c.meta_as("config")?;
        let motion_dim: usize = c.meta_as("motion_dim")?;
        let words: Vec<String> = c.meta_as("words")?;
        let stats: MotionStats = c.meta_as("stats")?;
        let provenance: String = c.meta_as("provenance")?;
        let words = words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        let mut x = Self::new(config, motion_dim, words, stats);
        let loaded = ParamSet::from_pairs(c.tensors);
        for (i, name) in NAMES.iter().enumerate() {
            let m = loaded
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("missing extractor tensor {name}")))?;
            if m.dim() != x.params.get(i).dim() {
                return Err(Error::Format(format!("extractor tensor {name} has the wrong shape")));
            }
            *x.params.get_mut(i) = m.clone();
        }
        x.provenance = provenance;
        Ok(x)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path, EXTRACTOR_MAGIC)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::load(path, EXTRACTOR_MAGIC)?)
    }
}

/// Trains both branches with a symmetric InfoNCE loss on the train split.
/// Each batch holds distinct captions, one motion per caption.
pub fn train_bi_encoder(corpus: &Corpus, config: &ExtractorConfig) -> Result<FeatureExtractor> {
    let stats = corpus.stats()?.clone();
    let mut by_text: BTreeMap<&str, Vec<MotionSequence>> = BTreeMap::new();
    for ann in corpus.split_annotations(Split::Train) {
        let m = corpus
            .motion(&ann.motion_id)
            .ok_or_else(|| Error::domain(format!("unknown motion {}", ann.motion_id)))?;
        by_text
            .entry(ann.text.as_str())
            .or_default()
            .push(normalize(m, &stats)?);
    }
    if by_text.len() < 2 {
        return Err(Error::Training(
            "contrastive training needs at least two distinct captions".into(),
        ));
    }
    let dim = corpus.feature_dim().ok_or_else(|| Error::domain("empty corpus"))?;
    let vocab: BTreeSet<String> = by_text.keys().flat_map(|t| caption_words(t)).collect();
    let words = vocab.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
    let mut x = FeatureExtractor::new(config.clone(), dim, words, stats);
    let texts: Vec<&str> = by_text.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xB1E);
    let mut opt = AdamW::new(&x.params, config.lr, 0.0);
    let batch = config.batch_size.clamp(2, texts.len());
    for _ in 0..config.steps {
        let chosen: Vec<&str> = texts.choose_multiple(&mut rng, batch).copied().collect();
        let mut g = Graph::new();
        let b = x.bind(&mut g, true);
        let mut t_rows = Vec::with_capacity(batch);
        let mut m_rows = Vec::with_capacity(batch);
        for t in &chosen {
            t_rows.push(x.text_graph(&mut g, &b, t));
            let pool = &by_text[t];
            let m = &pool[rng.random_range(0..pool.len())];
            m_rows.push(x.motion_graph(&mut g, &b, m));
        }
        let t_all = g.concat_rows(&t_rows);
        let m_all = g.concat_rows(&m_rows);
        let inv_t = 1.0 / config.temperature;
        let s_mt = g.matmul_t(m_all, t_all);
        let s_mt = g.scale(s_mt, inv_t);
        let s_tm = g.matmul_t(t_all, m_all);
        let s_tm = g.scale(s_tm, inv_t);
        let targets: Vec<Option<usize>> = (0..batch).map(Some).collect();
        let l1 = g.cross_entropy_sum(s_mt, &targets);
        let l2 = g.cross_entropy_sum(s_tm, &targets);
        let loss = g.add(l1, l2);
        if !g.scalar(loss).is_finite() {
            return Err(Error::Training("bi-encoder loss is not finite".into()));
        }
        let mut grads = g.backward(loss, 0.5 / batch as f64);
        let mut acc = GradAccumulator::new(x.params.len());
        acc.add(&mut grads, &b.vars);
        opt.step(&mut x.params, acc.sums());
    }
    x.provenance = format!(
        "bi-encoder: {} captions, {} steps, seed {}",
        texts.len(),
        config.steps,
        config.seed
    );
    Ok(x)
}

/// Fraction of `split` pairs whose own caption is closer than a randomly
/// chosen different caption.
pub fn matched_rate(x: &FeatureExtractor, corpus: &Corpus, split: Split, seed: u64) -> Result<f64> {
    let anns = corpus.split_annotations(split);
    let captions: Vec<&str> = anns
        .iter()
        .map(|a| a.text.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if anns.is_empty() || captions.len() < 2 {
        return Err(Error::domain("need pairs with at least two distinct captions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for a in &anns {
        let m = normalize(
            corpus
                .motion(&a.motion_id)
                .ok_or_else(|| Error::domain(format!("unknown motion {}", a.motion_id)))?,
            x.stats(),
        )?;
        let other = loop {
            let c = captions[rng.random_range(0..captions.len())];
            if c != a.text {
                break c;
            }
        };
        let mf = x.motion_features(&[&m])?;
        let tf = x.text_features(&[a.text.as_str(), other]);
        let d = |r: usize| {
            mf.row(0)
                .iter()
                .zip(tf.row(r).iter())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
        };
        if d(0) < d(1) {
            wins += 1;
        }
    }
    Ok(wins as f64 / anns.len() as f64)
}
