//! Command-line front end for the `mgpt` binary.
//!
//! Every command takes an optional `--config` TOML file, applies its flags
//! on top, writes its artifacts atomically and leaves a manifest with the
//! hash of the effective configuration next to them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::write_atomic;
use crate::config::{RunConfig, Stage};
use crate::data::{
    denormalize, load_dataset, normalize, read_mfa, synth_corpus_with, write_mfa, Layout, MotionSequence, Split,
    DEFAULT_FPS,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalPair, FeatureExtractor};
use crate::generate::{batch_generate, generate_motion, Models, SamplingConfig, SamplingMode, StopReason};
use crate::instruct::{read_jsonl, write_jsonl, PromptVariant, TaskKind};
use crate::lm::{
    answer_budget, build_prompt_vocab, pretrain_base, train_lora, AdapterMeta, AdapterState, EncodedSample,
    LanguageModel, LmConfig, LoraTarget,
};
use crate::pipeline;
use crate::render::render_svg;
use crate::vqvae::{MotionTokenSeq, VqVae};

pub const CACHE_ENV: &str = "MGPT_CACHE";
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "mgpt", version, about = "Text- and pose-conditioned motion generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset, validate a dataset directory, or export
    /// instruction samples.
    PrepareData(PrepareArgs),
    /// Train the motion tokenizer.
    TrainVqvae(TrainVqArgs),
    /// Fine-tune a LoRA adapter on an instruction JSONL file.
    TrainLm(TrainLmArgs),
    /// Train the evaluation feature extractor.
    TrainExtractor(TrainExtractorArgs),
    /// Generate one motion, or one per annotation of a dataset split.
    Generate(GenerateArgs),
    /// Score batch generation results against the ground truth.
    Evaluate(EvaluateArgs),
    /// Plot feature trajectories of a motion file as SVG.
    Render(RenderArgs),
    /// Run every stage and write one report per task.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generate a synthetic corpus.
    #[arg(long)]
    pub synth: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub families: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Existing dataset directory to validate or export from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Export train-split instruction samples as JSONL (needs `--vqvae`).
    #[arg(long)]
    pub instructions: bool,
    #[arg(long)]
    pub vqvae: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainVqArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Instruction samples (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen base checkpoint; built from the data when `--pretrain-steps`
    /// is given.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub lora_r: Option<usize>,
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Comma-separated subset of q,k,v,o,ffn_up,ffn_down.
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Motion vocabulary size; read from `--vqvae` when omitted.
    #[arg(long)]
    pub motion_vocab: Option<usize>,
    #[arg(long)]
    pub vqvae: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainExtractorArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Text,
    Init,
    Last,
    Key,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Text => TaskKind::TextOnly,
            TaskArg::Init => TaskKind::TextInit,
            TaskArg::Last => TaskKind::TextLast,
            TaskArg::Key => TaskKind::TextKey,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplingArg {
    Greedy,
    TopK,
    Temperature,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Motion description (single request).
    #[arg(long)]
    pub text: Option<String>,
    /// Condition frames in raw feature space (`.mfa`).
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Dataset directory; generates for every annotation of `--split`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Output `.mfa` file, or results directory in dataset mode.
    #[arg(long)]
    pub out: PathBuf,
    /// Print the rendered prompt.
    #[arg(long)]
    pub dump_prompt: bool,
    #[arg(long)]
    pub vqvae: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Use the frozen base without the adapter.
    #[arg(long)]
    pub no_adapter: bool,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `generate --data`.
    #[arg(long)]
    pub results: PathBuf,
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Drawn dashed on the same axes.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Comma-separated feature dimensions.
    #[arg(long, default_value = "0,1,2")]
    pub dims: String,
    #[arg(long)]
    pub title: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Checkpoint directory: `$MGPT_CACHE`, else `./.mgpt-cache`.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".mgpt-cache"))
}

fn cached(path: Option<&PathBuf>, name: &str) -> PathBuf {
    path.cloned().unwrap_or_else(|| cache_dir().join(name))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(format!("usage: {}", msg.into()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "missing {what}: {} does not exist",
            path.display()
        )))
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Run record written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

/// `<dir>/manifest.json` for directories, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn write_manifest(
    command: &str,
    config: &RunConfig,
    inputs: &[(&str, &Path)],
    outputs: &[&Path],
    details: serde_json::Value,
) -> Result<PathBuf> {
    let manifest = Manifest {
        command: command.into(),
        version: VERSION.into(),
        seed: config.seed,
        config_hash: config.digest(),
        config: config.clone(),
        inputs: inputs
            .iter()
            .map(|(k, p)| ((*k).to_string(), p.display().to_string()))
            .collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        details,
    };
    let path = manifest_path(outputs.first().copied().unwrap_or(Path::new("manifest")));
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    // A closed pipe on stdout is not an error for the command.
    let _ = writeln!(std::io::stdout(), "{v}");
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::TrainVqvae(a) => train_vqvae_cmd(a),
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::TrainExtractor(a) => train_extractor_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Run(a) => run_cmd(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(usage(e.to_string())),
    };
    run(cli)
}

/// Exit status for an error: 2 for usage and configuration problems, 1
/// otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.synth {
        if a.data.is_some() {
            return Err(usage("--synth and --data are mutually exclusive"));
        }
        let out = a.out.ok_or_else(|| usage("--synth needs --out"))?;
        if let Some(n) = a.n {
            cfg.data.n_clips = n;
        }
        if let Some(d) = a.dim {
            cfg.data.feature_dim = d;
        }
        if let Some(f) = a.families {
            cfg.data.n_families = f;
        }
        if let Some(l) = a.min_len {
            cfg.data.length_range.0 = l;
        }
        if let Some(l) = a.max_len {
            cfg.data.length_range.1 = l;
        }
        let corpus = synth_corpus_with(cfg.stage_seed(Stage::Data), &cfg.data)?;
        crate::data::export_dataset(&corpus, &out)?;
        write_manifest(
            "prepare-data",
            &cfg,
            &[],
            &[&out],
            json!({ "clips": corpus.motions.len(), "annotations": corpus.annotations.len() }),
        )?;
        print_json(&json!({ "out": out.display().to_string(), "clips": corpus.motions.len() }));
        return Ok(());
    }
    let data = a.data.ok_or_else(|| usage("pass --synth or --data <dir>"))?;
    let corpus = load_dataset(&data, Layout::Humanml3d)?;
    if !a.instructions {
        let counts: BTreeMap<&str, usize> = Split::ALL
            .iter()
            .map(|s| (s.name(), corpus.split_motions(*s).len()))
            .collect();
        print_json(&json!({
            "data": data.display().to_string(),
            "clips": corpus.motions.len(),
            "annotations": corpus.annotations.len(),
            "feature_dim": corpus.feature_dim(),
            "splits": counts,
        }));
        return Ok(());
    }
    let vq_path = cached(a.vqvae.as_ref(), "vqvae.ckpt");
    require(&vq_path, "VQ-VAE checkpoint")?;
    let vqvae = VqVae::load(&vq_path)?;
    let out = a.out.ok_or_else(|| usage("--instructions needs --out <file.jsonl>"))?;
    let split = a
        .split
        .as_deref()
        .map(Split::parse)
        .transpose()?
        .unwrap_or(Split::Train);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.stage_seed(Stage::Instructions));
    let samples =
        crate::instruct::build_instruction_corpus(&corpus, &vqvae, split, &cfg.lm.tasks, cfg.lm.variant, &mut rng)?;
    write_jsonl(&out, &samples)?;
    write_manifest(
        "prepare-data",
        &cfg,
        &[("data", &data), ("vqvae", &vq_path)],
        &[&out],
        json!({ "samples": samples.len(), "split": split.name() }),
    )?;
    print_json(&json!({ "out": out.display().to_string(), "samples": samples.len() }));
    Ok(())
}

fn train_vqvae_cmd(a: TrainVqArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.vqvae.steps = s;
    }
    if let Some(d) = &a.data {
        cfg.paths.data = Some(d.clone());
    }
    let data = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| usage("train-vqvae needs --data <dir>"))?;
    require(&data, "dataset directory")?;
    let corpus = pipeline::load_corpus(&cfg)?;
    let (model, log) = pipeline::train_tokenizer(&cfg, &corpus)?;
    let out = cached(a.out.as_ref(), "vqvae.ckpt");
    model.save(&out)?;
    let details = json!({
        "recon_probes": log.recon_probes,
        "usage_fraction": log.usage_fraction(),
    });
    write_manifest("train-vqvae", &cfg, &[("data", &data)], &[&out], details.clone())?;
    print_json(&json!({ "out": out.display().to_string(), "log": details }));
    Ok(())
}

fn train_lm_cmd(a: TrainLmArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let lm = &mut cfg.lm;
    if let Some(r) = a.lora_r {
        lm.lora.r = r;
    }
    if let Some(al) = a.lora_alpha {
        lm.lora.alpha = al;
    }
    if let Some(t) = &a.targets {
        lm.lora.targets = t
            .split(',')
            .map(|s| LoraTarget::parse(s.trim()))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = a.steps {
        lm.train.steps = s;
    }
    if let Some(lr) = a.lr {
        lm.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        lm.train.batch_size = b;
    }
    if let Some(m) = a.micro_batch {
        lm.train.micro_batch = m;
    }
    if let Some(p) = a.pretrain_steps {
        lm.pretrain.steps = p;
    }
    cfg.lm.lora.validate()?;
    require(&a.data, "instruction data")?;
    let samples = read_jsonl(&a.data)?;
    if samples.is_empty() {
        return Err(Error::data(&a.data, "no instruction samples"));
    }
    let base_path = cached(a.base.as_ref(), "base.ckpt");
    let mut details = serde_json::Map::new();
    let model = if base_path.exists() {
        LanguageModel::load(&base_path)?
    } else if a.pretrain_steps.is_some() {
        let n_codes = match (a.motion_vocab, &a.vqvae) {
            (Some(n), _) => n,
            (None, vq) => {
                let p = cached(vq.as_ref(), "vqvae.ckpt");
                require(&p, "VQ-VAE checkpoint (or pass --motion-vocab)")?;
                VqVae::load(&p)?.config().n_codes
            }
        };
        let vocab = build_prompt_vocab(&samples, n_codes, cfg.lm.spelling)?;
        let encoded: Vec<EncodedSample> = samples.iter().map(|s| vocab.encode_sample(s)).collect::<Result<_>>()?;
        let budget = answer_budget(&encoded);
        let needed = encoded.iter().map(|e| e.answer_start + budget).max().unwrap_or(1);
        let config = LmConfig {
            vocab_size: vocab.len(),
            max_seq_len: needed,
            ..cfg.lm.arch()
        };
        let mut model = LanguageModel::new(config, vocab, cfg.stage_seed(Stage::Lora))?;
        let schedule = crate::lm::TrainSchedule {
            seed: cfg.stage_seed(Stage::Pretrain),
            ..cfg.lm.pretrain.clone()
        };
        let log = pretrain_base(&mut model, &encoded, &schedule)?;
        model.save(&base_path)?;
        details.insert("pretrain_losses".into(), json!([log.first(), log.last()]));
        model
    } else {
        return Err(Error::Config(format!(
            "missing base checkpoint: {} does not exist (pass --pretrain-steps to build it)",
            base_path.display()
        )));
    };
    let encoded: Vec<EncodedSample> = samples
        .iter()
        .map(|s| model.vocab().encode_sample(s))
        .collect::<Result<_>>()?;
    let seed = cfg.stage_seed(Stage::Lora);
    let mut adapter = AdapterState::new(cfg.lm.lora.clone(), model.config(), seed ^ 0xA0A0)?;
    let schedule = crate::lm::TrainSchedule {
        seed,
        ..cfg.lm.train.clone()
    };
    let log = train_lora(&model, &mut adapter, &encoded, &schedule)?;
    let out = cached(a.out.as_ref(), "adapter.ckpt");
    let meta = AdapterMeta {
        lm: model.config().clone(),
        base_digest: model.digest(),
        answer_budget: answer_budget(&encoded),
    };
    adapter.save(&out, &meta)?;
    details.insert("losses".into(), json!([log.first(), log.last()]));
    details.insert(
        "trainable_ratio".into(),
        json!(crate::lm::trainable_ratio(&adapter, model.config())),
    );
    let details = serde_json::Value::Object(details);
    write_manifest(
        "train-lm",
        &cfg,
        &[("data", &a.data), ("base", &base_path)],
        &[&out],
        details.clone(),
    )?;
    print_json(&json!({ "out": out.display().to_string(), "log": details }));
    Ok(())
}

fn train_extractor_cmd(a: TrainExtractorArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.eval.extractor.steps = s;
    }
    if let Some(d) = &a.data {
        cfg.paths.data = Some(d.clone());
    }
    let data = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| usage("train-extractor needs --data <dir>"))?;
    require(&data, "dataset directory")?;
    let corpus = pipeline::load_corpus(&cfg)?;
    let x = pipeline::train_extractor(&cfg, &corpus)?;
    let out = cached(a.out.as_ref(), "extractor.ckpt");
    x.save(&out)?;
    let rate = crate::eval::matched_rate(&x, &corpus, Split::Val, cfg.seed).ok();
    let details = json!({ "val_matched_rate": rate });
    write_manifest("train-extractor", &cfg, &[("data", &data)], &[&out], details.clone())?;
    print_json(&json!({ "out": out.display().to_string(), "log": details }));
    Ok(())
}

/// Loads the VQ-VAE, base and (optionally) adapter, checking that the
/// adapter was trained on this base.
fn load_models(a: &GenerateArgs, variant: PromptVariant) -> Result<(Models, Option<AdapterMeta>)> {
    let vq_path = cached(a.vqvae.as_ref(), "vqvae.ckpt");
    let base_path = cached(a.base.as_ref(), "base.ckpt");
    require(&vq_path, "VQ-VAE checkpoint")?;
    require(&base_path, "base checkpoint")?;
    let vqvae = VqVae::load(&vq_path)?;
    let lm = LanguageModel::load(&base_path)?;
    let (adapter, meta) = if a.no_adapter {
        (None, None)
    } else {
        let p = cached(a.adapter.as_ref(), "adapter.ckpt");
        require(&p, "adapter checkpoint")?;
        let (adapter, meta) = AdapterState::load(&p)?;
        if meta.base_digest != lm.digest() {
            return Err(Error::data(&p, "adapter was trained on a different base checkpoint"));
        }
        (Some(adapter), Some(meta))
    };
    Ok((
        Models {
            vqvae,
            lm,
            adapter,
            variant,
        },
        meta,
    ))
}

/// Index of a batch generation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsIndex {
    pub task: TaskKind,
    pub split: Split,
    pub sampling: SamplingConfig,
    pub items: Vec<ResultEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub motion_id: String,
    pub text: String,
    /// Condition positions in the ground truth.
    pub positions: Vec<usize>,
    pub condition_tokens: Option<Vec<usize>>,
    /// Generated motion file (raw feature space), relative to the results
    /// directory.
    pub file: Option<String>,
    pub tokens: Option<Vec<usize>>,
    pub raw_answer: Option<String>,
    pub stop_reason: Option<StopReason>,
    pub failure: Option<String>,
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = &a.variant {
        cfg.lm.variant = PromptVariant::parse(v)?;
    }
    if let Some(s) = a.sampling {
        cfg.eval.sampling = match s {
            SamplingArg::Greedy => SamplingMode::Greedy,
            SamplingArg::TopK => SamplingMode::TopK,
            SamplingArg::Temperature => SamplingMode::Temperature,
        };
    }
    if let Some(k) = a.k {
        cfg.eval.top_k = k;
    }
    if let Some(t) = a.temperature {
        cfg.eval.temperature = t;
    }
    if let Some(m) = a.max_new_tokens {
        cfg.eval.max_new_tokens = Some(m);
    }
    let task: TaskKind = a.task.into();
    match (&a.data, &a.text) {
        (Some(_), Some(_)) => return Err(usage("--data and --text are mutually exclusive")),
        (None, None) => return Err(usage("pass --text <description> or --data <dir>")),
        (None, Some(_)) if task.has_pose() && a.cond.is_none() => {
            return Err(usage(format!("--task {} requires --cond <file.mfa>", task.name())));
        }
        (None, Some(_)) if !task.has_pose() && a.cond.is_some() => {
            return Err(usage("--task text takes no --cond"));
        }
        _ => {}
    }
    let (models, meta) = load_models(&a, cfg.lm.variant)?;
    let budget = meta
        .as_ref()
        .map(|m| m.answer_budget)
        .unwrap_or_else(|| (models.lm.config().max_seq_len / 4).max(1));
    let sampling = cfg.eval.sampling_config(budget, cfg.stage_seed(Stage::Sampling));
    let stats = models
        .vqvae
        .stats()
        .ok_or_else(|| Error::domain("VQ-VAE checkpoint has no normalization statistics"))?
        .clone();

    if let Some(data) = &a.data {
        let corpus = load_dataset(data, Layout::Humanml3d)?;
        let split = a
            .split
            .as_deref()
            .map(Split::parse)
            .transpose()?
            .unwrap_or(cfg.eval.split);
        let batch = batch_generate(
            &corpus,
            split,
            task,
            &models,
            &sampling,
            cfg.stage_seed(Stage::Conditions),
        )?;
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        let mut items = Vec::new();
        for (i, item) in batch.items.iter().enumerate() {
            let mut entry = ResultEntry {
                motion_id: item.motion_id.clone(),
                text: item.text.clone(),
                positions: item.condition.as_ref().map(|c| c.positions.clone()).unwrap_or_default(),
                condition_tokens: item.condition.as_ref().map(|c| c.tokens.indices().to_vec()),
                file: None,
                tokens: None,
                raw_answer: None,
                stop_reason: None,
                failure: None,
            };
            match &item.outcome {
                Ok(r) => {
                    let name = format!("{i:05}_{}.mfa", item.motion_id);
                    write_mfa(&a.out.join(&name), denormalize(&r.motion, &stats)?.frames())?;
                    entry.file = Some(name);
                    entry.tokens = Some(r.tokens.indices().to_vec());
                    entry.raw_answer = Some(r.raw_answer.clone());
                    entry.stop_reason = Some(r.stop_reason);
                }
                Err(f) => {
                    entry.raw_answer = f.raw_answer.clone();
                    entry.failure = Some(f.message.clone());
                }
            }
            items.push(entry);
        }
        let index = ResultsIndex {
            task,
            split,
            sampling: sampling.clone(),
            items,
        };
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&a.out.join("results.json"), text.as_bytes())?;
        let details = json!({ "items": batch.items.len(), "failures": batch.failures() });
        write_manifest("generate", &cfg, &[("data", data)], &[&a.out], details.clone())?;
        print_json(&json!({ "out": a.out.display().to_string(), "summary": details }));
        return Ok(());
    }

    let text = a.text.as_deref().expect("checked above");
    let cond = match &a.cond {
        Some(p) => {
            let frames = read_mfa(p)?;
            let raw = MotionSequence::new(frames, DEFAULT_FPS, "cond").map_err(|e| Error::data(p, e.to_string()))?;
            Some(normalize(&raw, &stats)?)
        }
        None => None,
    };
    let result = generate_motion(task, text, cond.as_ref(), &models, &sampling)?;
    write_mfa(&a.out, denormalize(&result.motion, &stats)?.frames())?;
    let mut summary = json!({
        "out": a.out.display().to_string(),
        "tokens": result.tokens.indices(),
        "frames": result.motion.len(),
        "stop_reason": result.stop_reason,
        "truncated": result.truncated,
        "raw_answer": result.raw_answer,
        "condition_tokens": result.condition_tokens.as_ref().map(MotionTokenSeq::indices),
    });
    if a.dump_prompt {
        summary["prompt"] = json!(result.prompt);
    }
    write_manifest("generate", &cfg, &[], &[&a.out], summary.clone())?;
    print_json(&summary);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.pool {
        cfg.eval.metrics.r_precision_pool = p;
    }
    let index_path = a.results.join("results.json");
    require(&index_path, "generation results")?;
    let index: ResultsIndex =
        serde_json::from_str(&fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?)
            .map_err(|e| Error::data(&index_path, e.to_string()))?;
    let x_path = cached(a.extractor.as_ref(), "extractor.ckpt");
    require(&x_path, "extractor checkpoint")?;
    let extractor = FeatureExtractor::load(&x_path)?;
    let corpus = load_dataset(&a.gt, Layout::Humanml3d)?;
    let stats = extractor.stats().clone();
    let mut pairs = Vec::with_capacity(index.items.len());
    for item in &index.items {
        let raw = corpus
            .motion(&item.motion_id)
            .ok_or_else(|| Error::data(&a.gt, format!("no ground truth for {}", item.motion_id)))?;
        let gt = normalize(raw, &stats)?;
        let condition = if index.task.has_pose() {
            Some((gt.select(&item.positions)?, item.positions.clone()))
        } else {
            None
        };
        let generated = match &item.file {
            Some(f) => {
                let p = a.results.join(f);
                let m = MotionSequence::new(read_mfa(&p)?, DEFAULT_FPS, item.motion_id.clone())
                    .map_err(|e| Error::data(&p, e.to_string()))?;
                Some(normalize(&m, &stats)?)
            }
            None => None,
        };
        pairs.push(EvalPair {
            motion_id: item.motion_id.clone(),
            text: item.text.clone(),
            task: index.task,
            gt,
            condition,
            generated,
        });
    }
    let metrics = EvalConfig {
        seed: cfg.stage_seed(Stage::Metrics),
        downsample: cfg.vqvae.downsample,
        ..cfg.eval.metrics.clone()
    };
    let report = evaluate(&pairs, &extractor, &metrics, Some(&index.sampling))?;
    report.save(&a.out)?;
    write_manifest(
        "evaluate",
        &cfg,
        &[("results", &a.results), ("gt", &a.gt), ("extractor", &x_path)],
        &[&a.out],
        json!({ "counts": report.counts }),
    )?;
    print_json(&serde_json::to_value(&report).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let dims: Vec<usize> = a
        .dims
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad dimension {s:?}"))))
        .collect::<Result<_>>()?;
    let load = |p: &Path| -> Result<MotionSequence> {
        MotionSequence::new(read_mfa(p)?, DEFAULT_FPS, p.display().to_string())
            .map_err(|e| Error::data(p, e.to_string()))
    };
    let motion = load(&a.input)?;
    let reference = a.reference.as_deref().map(load).transpose()?;
    let title = a.title.unwrap_or_else(|| a.input.display().to_string());
    let svg = render_svg(&motion, reference.as_ref(), &dims, &title)?;
    write_atomic(&a.out, svg.as_bytes())?;
    print_json(&json!({ "out": a.out.display().to_string(), "frames": motion.len() }));
    Ok(())
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = pipeline::run_pipeline(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    out.models.vqvae.save(&a.out.join("vqvae.ckpt"))?;
    out.models.lm.save(&a.out.join("base.ckpt"))?;
    if let Some(ad) = &out.models.adapter {
        ad.save(
            &a.out.join("adapter.ckpt"),
            &AdapterMeta {
                lm: out.models.lm.config().clone(),
                base_digest: out.models.lm.digest(),
                answer_budget: out.answer_budget,
            },
        )?;
    }
    out.extractor.save(&a.out.join("extractor.ckpt"))?;
    let mut summary = serde_json::Map::new();
    for (task, report) in &out.reports {
        report.save(&a.out.join(format!("report_{}.json", task.name())))?;
        summary.insert(
            task.name().into(),
            serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    write_manifest(
        "run",
        &cfg,
        &[],
        &[&a.out],
        json!({
            "vq_recon": out.vq_log.final_recon(),
            "vq_usage": out.vq_log.usage_fraction(),
            "lora_loss": out.lm_log.last(),
        }),
    )?;
    print_json(&serde_json::Value::Object(summary));
    Ok(())
}
