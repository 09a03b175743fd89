//! Motion VQ-VAE: a temporal encoder that downsamples by `f`, a codebook of
//! `N` learnable `d`-dimensional entries, and a mirrored decoder.
//!
//! The encoder is a stack of temporal convolutions whose first layer has
//! kernel and stride `f`, followed by pointwise layers; the decoder mirrors it
//! with a transposed kernel-`f` stride-`f` layer. Each latent therefore sees
//! exactly one window of `f` frames, so tokenizing a window-aligned slice of a
//! motion yields exactly the tokens of that slice within the whole motion.

use ndarray::Axis;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::checkpoint::{Container, VQVAE_MAGIC};
use crate::data::{Corpus, MotionSequence, MotionStats, Split, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::nn::{self, AdamW, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqVaeConfig {
    pub feature_dim: usize,
    /// Codebook size `N`.
    pub n_codes: usize,
    /// Latent width `d`.
    pub code_dim: usize,
    /// Temporal downsample factor `f`.
    pub downsample: usize,
    pub hidden: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl VqVaeConfig {
    /// Desk-scale defaults: `N = 64`, `d = 32`, `f = 4`, `β = 0.25`.
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            n_codes: 64,
            code_dim: 32,
            downsample: 4,
            hidden: 128,
            beta: 0.25,
        }
    }

    /// Full-scale defaults (`N = d = 512`).
    pub fn full(feature_dim: usize) -> Self {
        Self {
            n_codes: 512,
            code_dim: 512,
            hidden: 512,
            ..Self::desk(feature_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_codes < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if self.downsample == 0 || self.code_dim == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config("VQ-VAE dimensions must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    /// Entries start at the encoder outputs of randomly chosen train windows.
    #[default]
    Data,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_windows: usize,
    pub seed: u64,
    pub codebook_init: CodebookInit,
    /// Steps between full-train-set reconstruction probes in the log.
    pub eval_every: usize,
    /// Fraction of `steps` after which the learning rate is multiplied by
    /// `lr_decay`.
    pub decay_at: f64,
    pub lr_decay: f64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            batch_windows: 64,
            seed: 0,
            codebook_init: CodebookInit::Data,
            eval_every: 500,
            decay_at: 2.0 / 3.0,
            lr_decay: 0.1,
        }
    }
}

/// `N × d` codebook entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Mat,
}

impl Codebook {
    pub fn new(entries: Mat) -> Result<Self> {
        if entries.nrows() < 2 {
            return Err(Error::domain("codebook needs at least 2 entries"));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("codebook entries must be finite"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Index of the nearest entry; ties go to the lowest index.
    pub fn nearest(&self, row: ndarray::ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.outer_iter().enumerate() {
            let d: f64 = e.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Encoder output, `L × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub latents: Mat,
}

/// Non-empty sequence of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MotionTokenSeq(Vec<usize>);

impl MotionTokenSeq {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::domain("motion token sequence must be non-empty"));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Errors with the first position whose index is `>= vocab_size`.
    pub fn check_range(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().position(|&i| i >= vocab_size) {
            Some(pos) => Err(Error::domain(format!(
                "token {} at position {pos} is outside the codebook of size {vocab_size}",
                self.0[pos]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub embed: f64,
    /// Commitment term already multiplied by `beta`.
    pub commit: f64,
    /// Commitment term before weighting.
    pub commit_raw: f64,
    pub beta: f64,
    pub total: f64,
}

/// Loss terms from plain values: mean-square reconstruction, embedding and
/// `beta`-weighted commitment errors, and their sum.
pub fn vqvae_loss(motion: &Mat, recon: &Mat, latent: &Mat, quantized: &Mat, beta: f64) -> Result<LossBreakdown> {
    if beta < 0.0 {
        return Err(Error::domain(format!("beta must be non-negative, got {beta}")));
    }
    if motion.dim() != recon.dim() || latent.dim() != quantized.dim() {
        return Err(Error::domain("loss operands have inconsistent shapes"));
    }
    let mse = |a: &Mat, b: &Mat| {
        let n = a.len().max(1) as f64;
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
    };
    let recon_l = mse(recon, motion);
    let latent_gap = mse(latent, quantized);
    Ok(LossBreakdown {
        recon: recon_l,
        embed: latent_gap,
        commit: beta * latent_gap,
        commit_raw: latent_gap,
        beta,
        total: recon_l + latent_gap + beta * latent_gap,
    })
}

/// Nearest-entry indices and the selected entries for every latent row.
pub fn quantize(latent: &LatentSeq, codebook: &Codebook) -> Result<(MotionTokenSeq, Mat)> {
    if latent.latents.ncols() != codebook.dim() {
        return Err(Error::domain(format!(
            "latent width {} does not match codebook width {}",
            latent.latents.ncols(),
            codebook.dim()
        )));
    }
    let idx: Vec<usize> = latent.latents.outer_iter().map(|row| codebook.nearest(row)).collect();
    let q = codebook.entries.select(Axis(0), &idx);
    Ok((MotionTokenSeq::new(idx)?, q))
}

struct Layers {
    enc: [(usize, usize); 3],
    dec: [(usize, usize); 3],
    codebook: usize,
}

/// Trained (or freshly initialized) VQ-VAE parameters.
#[derive(Clone, Debug)]
pub struct VqVae {
    config: VqVaeConfig,
    params: ParamSet,
    stats: Option<MotionStats>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VqTrainLog {
    pub steps: Vec<LossBreakdown>,
    /// `(step, full-train-set reconstruction MSE)` probes; includes step 0
    /// and the final step.
    pub recon_probes: Vec<(usize, f64)>,
    pub usage: Vec<u64>,
}

impl VqTrainLog {
    pub fn initial_recon(&self) -> Option<f64> {
        self.recon_probes.first().map(|p| p.1)
    }

    pub fn final_recon(&self) -> Option<f64> {
        self.recon_probes.last().map(|p| p.1)
    }

    /// Fraction of codebook entries used at least once on the train set.
    pub fn usage_fraction(&self) -> f64 {
        if self.usage.is_empty() {
            return 0.0;
        }
        self.usage.iter().filter(|&&c| c > 0).count() as f64 / self.usage.len() as f64
    }
}

impl VqVae {
    pub fn new(config: VqVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fd, h, d) = (config.downsample * config.feature_dim, config.hidden, config.code_dim);
        let mut params = ParamSet::new();
        let shapes = [
            ("enc0", h, fd),
            ("enc1", h, h),
            ("enc2", d, h),
            ("dec0", h, d),
            ("dec1", h, h),
            ("dec2", fd, h),
        ];
        for (name, out, inp) in shapes {
            let mut w = nn::linear_weight(out, inp, &mut rng);
            if name.ends_with('2') {
                w *= 0.5;
            }
            params.insert(format!("{name}.w"), w);
            params.insert(format!("{name}.b"), Mat::zeros((1, out)));
        }
        params.insert("codebook", nn::normal_matrix(config.n_codes, d, 1.0, &mut rng));
        Ok(Self {
            config,
            params,
            stats: None,
        })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.config
    }

    pub fn stats(&self) -> Option<&MotionStats> {
        self.stats.as_ref()
    }

    pub fn set_stats(&mut self, stats: MotionStats) {
        self.stats = Some(stats);
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.params.by_name("codebook").expect("codebook param").clone(),
        }
    }

    fn layers(&self) -> Layers {
        let id = |n: &str| self.params.id(n).expect("known parameter");
        let pair = |p: &str| (id(&format!("{p}.w")), id(&format!("{p}.b")));
        Layers {
            enc: [pair("enc0"), pair("enc1"), pair("enc2")],
            dec: [pair("dec0"), pair("dec1"), pair("dec2")],
            codebook: id("codebook"),
        }
    }

    fn mlp(g: &mut Graph, vars: &[Var], stack: &[(usize, usize); 3], x: Var) -> Var {
        let mut h = x;
        for (i, (w, b)) in stack.iter().enumerate() {
            h = nn::linear(g, h, vars[*w], Some(vars[*b]));
            if i < 2 {
                h = g.relu(h);
            }
        }
        h
    }

    /// Flattened windows `[L × f·D]` of the first `L·f` frames.
    fn windows(&self, frames: &Mat) -> Result<Mat> {
        let f = self.config.downsample;
        let (t, d) = frames.dim();
        if d != self.config.feature_dim {
            return Err(Error::domain(format!(
                "motion width {d} does not match model width {}",
                self.config.feature_dim
            )));
        }
        if t < f {
            return Err(Error::domain(format!(
                "motion has {t} frames but the encoder needs at least {f}"
            )));
        }
        let l = t / f;
        let flat: Vec<f64> = frames.slice(ndarray::s![..l * f, ..]).iter().copied().collect();
        Ok(Mat::from_shape_vec((l, f * d), flat).expect("exact size"))
    }

    pub fn encode_windows(&self, windows: &Mat) -> Mat {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let layers = self.layers();
        let x = g.constant(windows.clone());
        let z = Self::mlp(&mut g, &vars, &layers.enc, x);
        g.value(z).clone()
    }

    /// Decoder output as flattened windows `[L × f·D]`.
    pub fn decode_windows(&self, quantized: &Mat) -> Mat {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let layers = self.layers();
        let q = g.constant(quantized.clone());
        let y = Self::mlp(&mut g, &vars, &layers.dec, q);
        g.value(y).clone()
    }

    fn unflatten(&self, windows: Mat) -> Mat {
        let (l, fd) = windows.dim();
        let f = self.config.downsample;
        windows.into_shape_with_order((l * f, fd / f)).expect("exact size")
    }

    /// Latents for a normalized motion; frames past the last full window are dropped.
    pub fn encode(&self, motion: &MotionSequence) -> Result<LatentSeq> {
        let w = self.windows(motion.frames())?;
        Ok(LatentSeq {
            latents: self.encode_windows(&w),
        })
    }

    pub fn decode(&self, quantized: &Mat) -> Result<MotionSequence> {
        if quantized.ncols() != self.config.code_dim || quantized.nrows() == 0 {
            return Err(Error::domain(format!(
                "expected a non-empty [L x {}] latent, got {:?}",
                self.config.code_dim,
                quantized.dim()
            )));
        }
        let frames = self.unflatten(self.decode_windows(quantized));
        MotionSequence::new(frames, DEFAULT_FPS, "decoded")
    }

    pub fn tokenize(&self, motion: &MotionSequence) -> Result<MotionTokenSeq> {
        let latent = self.encode(motion)?;
        Ok(quantize(&latent, &self.codebook())?.0)
    }

    /// Tokenize a short condition clip, repeating its last frame until the
    /// length is a whole number of windows.
    pub fn tokenize_condition(&self, frames: &MotionSequence) -> Result<MotionTokenSeq> {
        let f = self.config.downsample;
        let t = frames.len();
        let padded_len = t.div_ceil(f) * f;
        if padded_len == t {
            return self.tokenize(frames);
        }
        let mut rows: Vec<usize> = (0..t).collect();
        rows.resize(padded_len, t - 1);
        let padded = MotionSequence::new(
            frames.frames().select(Axis(0), &rows),
            frames.fps,
            frames.source_id.clone(),
        )?;
        self.tokenize(&padded)
    }

    pub fn detokenize(&self, tokens: &MotionTokenSeq) -> Result<MotionSequence> {
        tokens.check_range(self.config.n_codes)?;
        let entries = self.codebook().entries.select(Axis(0), tokens.indices());
        self.decode(&entries)
    }

    /// Mean-square reconstruction error of `decode(quantize(encode(m)))`
    /// against the window-aligned prefix of `m`, averaged over all elements.
    pub fn reconstruction_mse(&self, motions: &[&MotionSequence]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for m in motions {
            let recon = self.detokenize(&self.tokenize(m)?)?;
            let target = m.frames().slice(ndarray::s![..recon.len(), ..]);
            sum += recon
                .frames()
                .iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            count += recon.frames().len();
        }
        if count == 0 {
            return Err(Error::domain("no motions to reconstruct"));
        }
        Ok(sum / count as f64)
    }

    /// Loss on a batch of flattened windows and the gradient of the total
    /// with respect to every parameter (`None` where it does not flow).
    pub fn loss_and_grads(&self, windows: &Mat) -> (LossBreakdown, Vec<Option<Mat>>) {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let layers = self.layers();
        let x = g.constant(windows.clone());
        let z = Self::mlp(&mut g, &vars, &layers.enc, x);

        let codebook = self.codebook();
        let idx: Vec<usize> = g.value(z).outer_iter().map(|r| codebook.nearest(r)).collect();
        let q = g.gather(vars[layers.codebook], &idx);

        // Straight-through: forward uses q, backward treats it as z.
        let z_sg = g.detach(z);
        let q_sg = g.detach(q);
        let gap = g.sub(q_sg, z_sg);
        let q_st = g.add(z, gap);

        let y = Self::mlp(&mut g, &vars, &layers.dec, q_st);
        let r = g.sub(y, x);
        let recon = g.mean_square(r);
        let e = g.sub(z_sg, q);
        let embed = g.mean_square(e);
        let c = g.sub(z, q_sg);
        let commit_raw = g.mean_square(c);
        let commit = g.scale(commit_raw, self.config.beta);
        let partial = g.add(recon, embed);
        let total = g.add(partial, commit);

        let breakdown = LossBreakdown {
            recon: g.scalar(recon),
            embed: g.scalar(embed),
            commit: g.scalar(commit),
            commit_raw: g.scalar(commit_raw),
            beta: self.config.beta,
            total: g.scalar(total),
        };
        let mut grads = g.backward(total, 1.0);
        let per_param = vars.iter().map(|v| grads.take(*v)).collect();
        (breakdown, per_param)
    }

    pub fn usage_histogram(&self, motions: &[&MotionSequence]) -> Result<Vec<u64>> {
        let mut hist = vec![0u64; self.config.n_codes];
        for m in motions {
            for &i in self.tokenize(m)?.indices() {
                hist[i] += 1;
            }
        }
        Ok(hist)
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "stats": self.stats,
        });
        Container::new(meta, self.params.to_pairs())
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config: VqVaeConfig = c.meta_as("config")?;
        let stats: Option<MotionStats> = c.meta_as("stats")?;
        config.validate()?;
        let params = ParamSet::from_pairs(c.tensors);
        let model = Self { config, params, stats };
        // Fail early on a container missing any layer.
        for n in ["enc0.w", "enc2.b", "dec0.w", "dec2.b", "codebook"] {
            model.params.id(n)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path, VQVAE_MAGIC)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::load(path, VQVAE_MAGIC)?)
    }
}

/// Train on the normalized train split of `corpus`.
pub fn train_vqvae(corpus: &Corpus, config: VqVaeConfig, train: &VqTrainConfig) -> Result<(VqVae, VqTrainLog)> {
    let stats = corpus.stats()?.clone();
    let normalized = corpus.normalized()?;
    let motions = normalized.split_motions(Split::Train);
    if motions.is_empty() {
        return Err(Error::domain("train split is empty"));
    }
    let mut model = VqVae::new(config, train.seed)?;
    model.set_stats(stats);

    let mut rows = Vec::new();
    for m in &motions {
        let w = model.windows(m.frames())?;
        rows.extend(w.outer_iter().map(|r| r.to_owned()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    let all_windows = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let n_windows = all_windows.nrows();

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x0123_4567);
    if train.codebook_init == CodebookInit::Data {
        let n = model.config.n_codes;
        let picks: Vec<usize> = if n_windows >= n {
            sample(&mut rng, n_windows, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..n_windows)).collect()
        };
        let z = model.encode_windows(&all_windows.select(Axis(0), &picks));
        let cb = model.layers().codebook;
        *model.params.get_mut(cb) = z;
    }

    let mut log = VqTrainLog::default();
    log.recon_probes.push((0, model.reconstruction_mse(&motions)?));
    let mut opt = AdamW::new(&model.params, train.lr, 0.0);
    let batch = train.batch_windows.max(1);
    let mut last_finite = 0;
    let decay_step = (train.steps as f64 * train.decay_at).round() as usize;
    for step in 0..train.steps {
        if step == decay_step {
            opt.lr = train.lr * train.lr_decay;
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_windows)).collect();
        let (loss, grads) = model.loss_and_grads(&all_windows.select(Axis(0), &idx));
        if !loss.total.is_finite() {
            return Err(Error::Training(format!(
                "VQ-VAE loss became non-finite at step {step}; last finite step {last_finite}"
            )));
        }
        last_finite = step;
        log.steps.push(loss);
        opt.step(&mut model.params, &grads);
        let done = step + 1;
        if train.eval_every > 0 && done % train.eval_every == 0 && done != train.steps {
            log.recon_probes.push((done, model.reconstruction_mse(&motions)?));
        }
    }
    if train.steps > 0 {
        log.recon_probes
            .push((train.steps, model.reconstruction_mse(&motions)?));
    }
    log.usage = model.usage_histogram(&motions)?;
    Ok((model, log))
}
