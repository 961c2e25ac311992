//! Command-line front end. Every artifact-producing command records a
//! [`RunManifest`] next to its outputs; `replay` re-executes one.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::{export, final_token_profile, ProfileMeta};
use crate::augment::{HttpService, MockParaphraser, MockTranslator, ServiceError, TextService};
use crate::augment::{build_pair_corpus, AugmentConfig, AugmentError, AugmentMethod, Clients};
use crate::checkpoint::{load_model, save_model, Checkpoint};
use crate::corpus::{
    generate_synthetic, load_jsonl, load_labeled, load_pairs, load_raw, save_labeled, save_pairs, CorpusError,
    Dataset, DatasetKind, Split, SyntheticSpec,
};
use crate::eval::{classify_eval, cluster_eval, EvalError};
use crate::lora::{AdaptedModel, LoraSpec};
use crate::model::{Backbone, ModelConfig, Transformer};
use crate::pooling::{PoolingKind, PoolingStrategy};
use crate::prompts::{self, PromptTemplate};
use crate::tensor::{fnv1a, splitmix, FNV_OFFSET};
use crate::tokenizer::Vocabulary;
use crate::trainer::{TrainConfig, TrainError, Trainer};
use crate::{Error, Scalar};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_SCHEMA: u8 = 2;
pub const EXIT_EXHAUSTED: u8 = 3;
pub const EXIT_NON_FINITE: u8 = 4;
pub const EXIT_DATASET: u8 = 5;
pub const EXIT_ATTENTION: u8 = 6;

pub const BASE_CHECKPOINT: &str = "base.model.ckpt";

#[derive(Debug, Parser)]
#[command(name = "embedlab", version, about = "Sentence embeddings from a small decoder-only transformer")]
pub struct Cli {
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file with [model], [lora], [train], [augment], [synth], [vocab] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from JSONL corpora.
    Vocab(VocabArgs),
    /// Generate a topic-clustered labeled dataset.
    Synth(SynthArgs),
    /// Turn raw texts into positive pairs.
    Augment(AugmentArgs),
    /// Contrastive adapter fine-tuning.
    Train(TrainArgs),
    /// Clustering or classification scores for one or more checkpoints.
    Eval(EvalArgs),
    /// Export the final token's last-layer attention.
    Attn(AttnArgs),
    /// Re-run a command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cluster,
    Classify,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "raw")]
    pub kind: String,
    #[arg(long)]
    pub max_size: Option<usize>,
    /// Also add the words of every built-in prompt template.
    #[arg(long)]
    pub with_templates: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub samples_per_cluster: Option<usize>,
    #[arg(long)]
    pub words_per_cluster: Option<usize>,
    #[arg(long)]
    pub shared_words: Option<usize>,
    #[arg(long)]
    pub mixture: Option<f64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub input: PathBuf,
    /// Comma-separated: deletion, swap, char_noise, back_translation, llm_paraphrase, identity.
    #[arg(long, value_delimiter = ',', required = true)]
    pub methods: Vec<AugmentMethod>,
    /// Use deterministic offline translator and paraphraser.
    #[arg(long)]
    pub mock_clients: bool,
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub pairs: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Start from this model checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub pooling: Option<PoolingKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled JSONL; for classification also the training split unless --test is given.
    pub dataset: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Adapter or model checkpoint; defaults to the base model.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Several checkpoints ("base" for the plain model) compared in one grid.
    #[arg(long, num_args = 1.., conflicts_with = "checkpoint")]
    pub compare: Vec<String>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cluster")]
    pub task: Task,
    /// Comma-separated template names; "none" for raw text.
    #[arg(long, value_delimiter = ',', default_value = "none")]
    pub templates: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "mean")]
    pub poolings: Vec<PoolingKind>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    pub text: String,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub per_head: bool,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Values a config file may supply; each table is optional and partial.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub model: ModelConfig,
    pub lora: LoraSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub synth: SynthSettings,
    pub vocab: VocabSettings,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub clusters: usize,
    pub samples_per_cluster: usize,
    pub words_per_cluster: usize,
    pub shared_words: usize,
    pub mixture: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            clusters: 4,
            samples_per_cluster: 50,
            words_per_cluster: 12,
            shared_words: 12,
            mixture: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSettings {
    pub max_size: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self { max_size: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabJob {
    pub inputs: Vec<PathBuf>,
    pub kind: DatasetKind,
    pub max_size: usize,
    pub with_templates: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub settings: SynthSettings,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentJob {
    pub input: PathBuf,
    pub methods: Vec<AugmentMethod>,
    pub config: AugmentConfig,
    pub mock_clients: bool,
    pub timeout_ms: u64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub pairs: PathBuf,
    pub vocab: PathBuf,
    pub validation: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub lora: LoraSpec,
    pub train: TrainConfig,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub dataset: PathBuf,
    pub test: Option<PathBuf>,
    pub base: PathBuf,
    pub vocab: PathBuf,
    pub checkpoints: Vec<String>,
    pub task: Task,
    pub templates: Vec<String>,
    pub poolings: Vec<PoolingKind>,
    pub seed: u64,
    pub precision: Precision,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnJob {
    pub text: String,
    pub base: PathBuf,
    pub adapter: Option<PathBuf>,
    pub vocab: PathBuf,
    pub template: Option<String>,
    pub per_head: bool,
    pub precision: Precision,
    pub out: PathBuf,
}

/// A fully resolved command: flags, config file and defaults merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "snake_case")]
pub enum Job {
    Vocab(VocabJob),
    Synth(SynthJob),
    Augment(AugmentJob),
    Train(TrainJob),
    Eval(EvalJob),
    Attn(AttnJob),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub fnv1a: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        let data = std::fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            fnv1a: format!("{:016x}", fnv1a(&data, FNV_OFFSET)),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    #[serde(flatten)]
    pub job: Job,
    pub seed: u64,
    pub build: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// What a finished command produced.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

fn corpus_error(err: &anyhow::Error) -> Option<&CorpusError> {
    err.chain().find_map(|c| {
        c.downcast_ref::<CorpusError>().or(match c.downcast_ref::<Error>() {
            Some(Error::Corpus(e)) => Some(e),
            _ => None,
        })
    })
}

fn exit_code(job: &Job, err: &anyhow::Error) -> u8 {
    let schema = matches!(
        corpus_error(err),
        Some(CorpusError::Schema { .. } | CorpusError::Invalid(_))
    );
    match job {
        Job::Augment(_) => {
            let exhausted = err.chain().any(|c| {
                c.downcast_ref::<AugmentError>().is_some_and(AugmentError::is_exhaustion)
                    || matches!(c.downcast_ref::<Error>(), Some(Error::Augment(e)) if e.is_exhaustion())
            });
            if exhausted {
                EXIT_EXHAUSTED
            } else if schema {
                EXIT_SCHEMA
            } else {
                EXIT_FAILURE
            }
        }
        Job::Train(_) => {
            let non_finite = err.chain().any(|c| {
                matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFiniteLoss { .. }))
                    || matches!(
                        c.downcast_ref::<Error>(),
                        Some(Error::Train(TrainError::NonFiniteLoss { .. }))
                    )
            });
            if non_finite {
                EXIT_NON_FINITE
            } else if schema {
                EXIT_SCHEMA
            } else {
                EXIT_FAILURE
            }
        }
        Job::Eval(_) => {
            let dataset = corpus_error(err).is_some()
                || err.chain().any(|c| {
                    c.downcast_ref::<EvalError>().is_some() || matches!(c.downcast_ref::<Error>(), Some(Error::Eval(_)))
                });
            if dataset {
                EXIT_DATASET
            } else {
                EXIT_FAILURE
            }
        }
        Job::Attn(_) => EXIT_ATTENTION,
        Job::Vocab(_) | Job::Synth(_) => {
            if schema {
                EXIT_SCHEMA
            } else {
                EXIT_FAILURE
            }
        }
    }
}

impl Cli {
    /// Merges flags over the config file over built-in defaults.
    pub fn resolve(&self) -> anyhow::Result<Job> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let seed = self.seed.or(file.seed).unwrap_or(0);
        let precision = |flag: Option<Precision>| flag.or(file.precision).unwrap_or_default();
        Ok(match &self.command {
            Command::Vocab(a) => Job::Vocab(VocabJob {
                inputs: a.inputs.clone(),
                kind: a.kind.parse()?,
                max_size: a.max_size.unwrap_or(file.vocab.max_size),
                with_templates: a.with_templates,
                out: a.out.clone(),
            }),
            Command::Synth(a) => {
                let mut s = file.synth.clone();
                set(&mut s.clusters, a.clusters);
                set(&mut s.samples_per_cluster, a.samples_per_cluster);
                set(&mut s.words_per_cluster, a.words_per_cluster);
                set(&mut s.shared_words, a.shared_words);
                set(&mut s.mixture, a.mixture);
                Job::Synth(SynthJob {
                    settings: s,
                    seed,
                    out: a.out.clone(),
                })
            }
            Command::Augment(a) => {
                let mut config = file.augment.clone();
                if let Some(j) = self.jobs {
                    config.max_in_flight = config.max_in_flight.min(j.max(1));
                }
                Job::Augment(AugmentJob {
                    input: a.input.clone(),
                    methods: a.methods.clone(),
                    config,
                    mock_clients: a.mock_clients,
                    timeout_ms: a.timeout_ms.unwrap_or(30_000),
                    seed,
                    out: a.out.clone(),
                })
            }
            Command::Train(a) => {
                let mut model = file.model.clone();
                set(&mut model.d_model, a.d_model);
                set(&mut model.n_layers, a.layers);
                set(&mut model.n_heads, a.heads);
                set(&mut model.d_ff, a.d_ff);
                set(&mut model.max_seq_len, a.max_seq_len);
                model.seed = seed;
                let mut lora = file.lora.clone();
                set(&mut lora.rank, a.rank);
                set(&mut lora.alpha, a.alpha);
                let mut train = file.train.clone();
                set(&mut train.learning_rate, a.lr);
                set(&mut train.batch_size, a.batch_size);
                set(&mut train.temperature, a.temperature);
                set(&mut train.dropout_p, a.dropout);
                set(&mut train.max_steps, a.steps);
                set(&mut train.checkpoint_every, a.checkpoint_every);
                set(&mut train.eval_every, a.eval_every);
                set(&mut train.weight_decay, a.weight_decay);
                if let Some(k) = a.pooling {
                    train.pooling.kind = k;
                }
                if a.template.is_some() {
                    train.template = a.template.clone().filter(|t| t != "none");
                }
                train.seed = seed;
                lora.dropout_p = train.dropout_p;
                Job::Train(TrainJob {
                    pairs: a.pairs.clone(),
                    vocab: a.vocab.clone(),
                    validation: a.validation.clone(),
                    base: a.base.clone(),
                    out_dir: a.out_dir.clone(),
                    model,
                    lora,
                    train,
                    precision: precision(a.precision),
                })
            }
            Command::Eval(a) => {
                let checkpoints = if !a.compare.is_empty() {
                    a.compare.clone()
                } else {
                    vec![a.checkpoint.clone().unwrap_or_else(|| "base".into())]
                };
                Job::Eval(EvalJob {
                    dataset: a.dataset.clone(),
                    test: a.test.clone(),
                    base: a.base.clone(),
                    vocab: a.vocab.clone(),
                    checkpoints,
                    task: a.task,
                    templates: a.templates.clone(),
                    poolings: a.poolings.clone(),
                    seed,
                    precision: precision(a.precision),
                    out: a.out.clone(),
                })
            }
            Command::Attn(a) => Job::Attn(AttnJob {
                text: a.text.clone(),
                base: a.base.clone(),
                adapter: a.adapter.clone(),
                vocab: a.vocab.clone(),
                template: a.template.clone().filter(|t| t != "none"),
                per_head: a.per_head,
                precision: precision(a.precision),
                out: a.out.clone(),
            }),
            Command::Replay(_) => bail!("replay has no resolved form"),
        })
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn template(name: Option<&str>) -> anyhow::Result<Option<PromptTemplate>> {
    match name {
        None | Some("none") => Ok(None),
        Some(n) => Ok(Some(prompts::lookup(n)?)),
    }
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Vocab(_) => "vocab",
            Job::Synth(_) => "synth",
            Job::Augment(_) => "augment",
            Job::Train(_) => "train",
            Job::Eval(_) => "eval",
            Job::Attn(_) => "attn",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::Synth(j) => j.seed,
            Job::Augment(j) => j.seed,
            Job::Train(j) => j.train.seed,
            Job::Eval(j) => j.seed,
            Job::Vocab(_) | Job::Attn(_) => 0,
        }
    }

    pub fn execute(&self) -> Result<Artifacts, Failure> {
        let result = match self {
            Job::Vocab(j) => run_vocab(j),
            Job::Synth(j) => run_synth(j),
            Job::Augment(j) => run_augment(j),
            Job::Train(j) => match j.precision {
                Precision::F32 => run_train::<f32>(j),
                Precision::F64 => run_train::<f64>(j),
            },
            Job::Eval(j) => match j.precision {
                Precision::F32 => run_eval::<f32>(j),
                Precision::F64 => run_eval::<f64>(j),
            },
            Job::Attn(j) => match j.precision {
                Precision::F32 => run_attn::<f32>(j),
                Precision::F64 => run_attn::<f64>(j),
            },
        };
        result.map_err(|e| Failure::new(exit_code(self, &e), e))
    }

    /// Executes and writes the manifest alongside the outputs.
    pub fn execute_recorded(&self) -> Result<Artifacts, Failure> {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let clock = Instant::now();
        let artifacts = self.execute()?;
        let Some(path) = &artifacts.manifest else {
            return Ok(artifacts);
        };
        let digests = |paths: &[PathBuf]| -> Result<Vec<FileDigest>, Failure> {
            paths
                .iter()
                .map(|p| FileDigest::of(p).with_context(|| format!("hashing {}", p.display())))
                .collect::<anyhow::Result<_>>()
                .map_err(|e| Failure::new(EXIT_FAILURE, e))
        };
        let manifest = RunManifest {
            job: self.clone(),
            seed: self.seed(),
            build: format!("embedlab {}", env!("CARGO_PKG_VERSION")),
            inputs: digests(&artifacts.inputs)?,
            outputs: digests(&artifacts.outputs)?,
            started_unix,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        };
        write_json(path, &manifest).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
        Ok(artifacts)
    }
}

fn run_vocab(j: &VocabJob) -> anyhow::Result<Artifacts> {
    let mut texts = Vec::new();
    for p in &j.inputs {
        match load_jsonl(p, j.kind)? {
            Dataset::Raw(t) => texts.extend(t),
            Dataset::Pairs(ps) => texts.extend(ps.into_iter().flat_map(|p| [p.anchor, p.positive])),
            Dataset::Labeled(d) => texts.extend(d.texts().iter().cloned()),
        }
    }
    if j.with_templates {
        texts.extend(prompts::BUILTIN_PATTERNS.iter().map(|(_, p)| p.replace(prompts::PLACEHOLDER, " ")));
    }
    let vocab = Vocabulary::build(&texts, j.max_size)?;
    vocab.save(&j.out)?;
    log::info!("vocabulary of {} tokens written to {}", vocab.len(), j.out.display());
    Ok(Artifacts {
        inputs: j.inputs.clone(),
        outputs: vec![j.out.clone()],
        manifest: Some(manifest_path_for(&j.out)),
    })
}

fn run_synth(j: &SynthJob) -> anyhow::Result<Artifacts> {
    let s = &j.settings;
    let spec = SyntheticSpec::with_generated_pools(
        s.clusters,
        s.samples_per_cluster,
        s.words_per_cluster,
        s.shared_words,
        s.mixture,
        j.seed,
    );
    let data = generate_synthetic(&spec)?;
    save_labeled(&j.out, &data)?;
    log::info!("{} labeled texts written to {}", data.len(), j.out.display());
    Ok(Artifacts {
        inputs: vec![],
        outputs: vec![j.out.clone()],
        manifest: Some(manifest_path_for(&j.out)),
    })
}

fn run_augment(j: &AugmentJob) -> anyhow::Result<Artifacts> {
    let texts = load_raw(&j.input)?;
    let timeout = Duration::from_millis(j.timeout_ms);
    let translator: Option<Box<dyn TextService>> = if j.mock_clients {
        Some(Box::new(MockTranslator {
            source_language: j.config.source_language.clone(),
        }))
    } else {
        HttpService::from_env("MT", timeout).map(|s| Box::new(s) as Box<dyn TextService>)
    };
    let paraphraser: Option<Box<dyn TextService>> = if j.mock_clients {
        Some(Box::new(MockParaphraser::default()))
    } else {
        HttpService::from_env("LLM", timeout).map(|s| Box::new(s) as Box<dyn TextService>)
    };
    let clients = Clients {
        translator: translator.as_deref(),
        paraphraser: paraphraser.as_deref(),
    };
    let corpus = build_pair_corpus(&texts, &j.methods, &j.config, clients, j.seed)?;
    save_pairs(&j.out, &corpus.pairs)?;
    for f in &corpus.failures {
        log::warn!("item {} ({}) failed: {}", f.index, f.method.name(), f.error);
    }
    log::info!(
        "{} pairs written to {} ({} failures, {} identical positives dropped)",
        corpus.pairs.len(),
        j.out.display(),
        corpus.failures.len(),
        corpus.filtered
    );
    if let Some(f) = corpus.failures.iter().find(|f| f.exhausted) {
        let n = corpus.failures.iter().filter(|f| f.exhausted).count();
        return Err(anyhow!(AugmentError::Exhausted {
            attempts: j.config.retry.max_attempts,
            last: ServiceError::Transport(f.error.clone()),
        }))
        .context(format!("{n} items exhausted their retries"));
    }
    Ok(Artifacts {
        inputs: vec![j.input.clone()],
        outputs: vec![j.out.clone()],
        manifest: Some(manifest_path_for(&j.out)),
    })
}

fn run_train<T: Scalar>(j: &TrainJob) -> anyhow::Result<Artifacts> {
    let vocab = Vocabulary::load(&j.vocab)?;
    let pairs = load_pairs(&j.pairs)?;
    let validation = j.validation.as_ref().map(|p| load_labeled(p, Split::Test)).transpose()?;
    let tmpl = template(j.train.template.as_deref())?;
    std::fs::create_dir_all(&j.out_dir)?;

    let base: Transformer<T> = match &j.base {
        Some(p) => load_model(p)?,
        None => {
            let cfg = ModelConfig {
                vocab_size: vocab.len(),
                ..j.model.clone()
            };
            Transformer::init(&cfg)?
        }
    };
    if base.config.vocab_size != vocab.len() {
        bail!(
            "model expects {} tokens but the vocabulary has {}",
            base.config.vocab_size,
            vocab.len()
        );
    }
    let base_path = j.out_dir.join(BASE_CHECKPOINT);
    save_model(&base, &base_path)?;
    let mut model = AdaptedModel::attach(base, j.lora.clone(), splitmix(j.train.seed ^ 0x10aa))?;

    let mut trainer = Trainer::new(&vocab, tmpl.as_ref(), j.train.clone()).with_out_dir(&j.out_dir);
    trainer.base_id = Some(BASE_CHECKPOINT.into());
    if let Some(v) = &validation {
        trainer = trainer.with_validation(v);
    }
    let report = trainer.train(&mut model, &pairs)?;
    let report_path = j.out_dir.join("report.json");
    write_json(&report_path, &report)?;
    match report.best_score {
        Some(score) => log::info!("{} steps, best step {} (score {score:.4})", report.steps, report.best_step),
        None => log::info!("{} steps", report.steps),
    }

    let mut inputs = vec![j.pairs.clone(), j.vocab.clone()];
    inputs.extend(j.validation.iter().cloned());
    inputs.extend(j.base.iter().cloned());
    let mut outputs = vec![base_path];
    outputs.extend(report.checkpoints.iter().cloned());
    outputs.extend(report.best_checkpoint.iter().cloned());
    outputs.push(report_path);
    Ok(Artifacts {
        inputs,
        outputs,
        manifest: Some(j.out_dir.join("manifest.json")),
    })
}

/// The base model, or the base with a checkpoint applied: adapter files are
/// attached to the base, model files replace it.
pub fn load_backbone<T: Scalar>(base: &Transformer<T>, checkpoint: &str) -> anyhow::Result<Box<dyn Backbone<T>>> {
    if checkpoint == "base" {
        return Ok(Box::new(base.clone()));
    }
    let ckpt = Checkpoint::read(checkpoint)?;
    match ckpt.kind() {
        "adapter" => {
            let (spec, adapters) = ckpt.to_adapters::<T>(&base.config)?;
            Ok(Box::new(AdaptedModel::from_parts(base.clone(), spec, adapters)?))
        }
        _ => Ok(Box::new(ckpt.to_model::<T>()?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub checkpoint: String,
    pub template: String,
    pub pooling: PoolingKind,
    pub score: f64,
    pub report: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub task: Task,
    pub dataset: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalOutput {
    /// Checkpoints down, template/pooling combinations across.
    pub fn table(&self) -> String {
        let mut columns: Vec<(String, PoolingKind)> = Vec::new();
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !columns.contains(&(r.template.clone(), r.pooling)) {
                columns.push((r.template.clone(), r.pooling));
            }
            if !names.contains(&r.checkpoint.as_str()) {
                names.push(&r.checkpoint);
            }
        }
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(10);
        let mut out = format!("{:width$}", "checkpoint");
        for (t, p) in &columns {
            out += &format!(" | {:>14}", format!("{t}/{}", p.name()));
        }
        out.push('\n');
        for n in names {
            out += &format!("{n:width$}");
            for (t, p) in &columns {
                let cell = self
                    .rows
                    .iter()
                    .find(|r| r.checkpoint == n && &r.template == t && r.pooling == *p)
                    .map(|r| format!("{:.4}", r.score))
                    .unwrap_or_default();
                out += &format!(" | {cell:>14}");
            }
            out.push('\n');
        }
        out
    }
}

fn run_eval<T: Scalar>(j: &EvalJob) -> anyhow::Result<Artifacts> {
    let vocab = Vocabulary::load(&j.vocab)?;
    let base: Transformer<T> = load_model(&j.base)?;
    let data = load_labeled(&j.dataset, Split::Train)?;
    let (train, test) = match (&j.task, &j.test) {
        (Task::Classify, Some(p)) => (data, Some(load_labeled(p, Split::Test)?)),
        (Task::Classify, None) => {
            let (a, b) = data.split_train_test(0.5, j.seed);
            (a, Some(b))
        }
        (Task::Cluster, _) => (data, None),
    };
    let mut rows = Vec::new();
    for ck in &j.checkpoints {
        let backbone = load_backbone(&base, ck)?;
        for tname in &j.templates {
            let tmpl = template(Some(tname))?;
            for &kind in &j.poolings {
                let pooling = PoolingStrategy::new(kind);
                let (score, report) = match &test {
                    None => {
                        let r = cluster_eval(&*backbone, &vocab, &train, tmpl.as_ref(), pooling, j.seed)?;
                        (r.v_measure, serde_json::to_value(&r)?)
                    }
                    Some(test) => {
                        let r = classify_eval(&*backbone, &vocab, &train, test, tmpl.as_ref(), pooling, j.seed)?;
                        (r.accuracy, serde_json::to_value(&r)?)
                    }
                };
                rows.push(EvalRow {
                    checkpoint: ck.clone(),
                    template: tname.clone(),
                    pooling: kind,
                    score,
                    report,
                });
            }
        }
    }
    let output = EvalOutput {
        task: j.task,
        dataset: j.dataset.display().to_string(),
        seed: j.seed,
        rows,
    };
    println!("{}", output.table());

    let mut inputs = vec![j.dataset.clone(), j.vocab.clone(), j.base.clone()];
    inputs.extend(j.test.iter().cloned());
    inputs.extend(j.checkpoints.iter().filter(|c| *c != "base").map(PathBuf::from));
    let (outputs, manifest) = match &j.out {
        Some(p) => {
            write_json(p, &output)?;
            (vec![p.clone()], Some(manifest_path_for(p)))
        }
        None => (vec![], None),
    };
    Ok(Artifacts {
        inputs,
        outputs,
        manifest,
    })
}

fn run_attn<T: Scalar>(j: &AttnJob) -> anyhow::Result<Artifacts> {
    let vocab = Vocabulary::load(&j.vocab)?;
    let base: Transformer<T> = load_model(&j.base)?;
    let checkpoint = j
        .adapter
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "base".into());
    let backbone = load_backbone(&base, &checkpoint)?;
    let tmpl = template(j.template.as_deref())?;
    let profile = final_token_profile(&*backbone, &vocab, &j.text, tmpl.as_ref(), j.per_head)?;
    let meta = ProfileMeta {
        checkpoint: checkpoint.clone(),
        template: j.template.clone().unwrap_or_else(|| "none".into()),
    };
    export(&profile, &meta, &j.out)?;
    println!("{:>16}  weight", "token");
    for (t, w) in profile.tokens.iter().zip(&profile.weights) {
        println!("{t:>16}  {w:.4}");
    }
    if profile.content.is_some() {
        println!("content mass {:.4}", profile.content_mass());
    }

    let mut inputs = vec![j.vocab.clone(), j.base.clone()];
    inputs.extend(j.adapter.iter().cloned());
    Ok(Artifacts {
        inputs,
        outputs: vec![j.out.clone(), j.out.with_extension("json")],
        manifest: Some(manifest_path_for(&j.out)),
    })
}

/// Outcome of a replay: recorded vs fresh digest per output.
#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub mismatched: Vec<PathBuf>,
    pub checked: usize,
}

pub fn replay(manifest_path: &Path) -> Result<ReplayReport, Failure> {
    let manifest = RunManifest::load(manifest_path).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    manifest.job.execute()?;
    let mut mismatched = Vec::new();
    for recorded in &manifest.outputs {
        match FileDigest::of(&recorded.path) {
            Ok(fresh) if fresh == *recorded => {}
            _ => mismatched.push(recorded.path.clone()),
        }
    }
    Ok(ReplayReport {
        mismatched,
        checked: manifest.outputs.len(),
    })
}

fn configure_threads(jobs: Option<usize>) {
    if let Some(n) = jobs {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_err()
        {
            log::debug!("thread pool already configured");
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Artifacts, Failure> {
    configure_threads(cli.jobs);
    if let Command::Replay(r) = &cli.command {
        let report = replay(&r.manifest)?;
        if !report.mismatched.is_empty() {
            let list: Vec<String> = report.mismatched.iter().map(|p| p.display().to_string()).collect();
            return Err(Failure::new(
                EXIT_FAILURE,
                anyhow!("replay produced different outputs: {}", list.join(", ")),
            ));
        }
        println!("{} outputs reproduced byte for byte", report.checked);
        return Ok(Artifacts::default());
    }
    let job = cli.resolve().map_err(|e| Failure::new(EXIT_SCHEMA, e))?;
    job.execute_recorded()
}

/// Parses `args` (program name first) and runs them.
pub fn run_args<I, S>(args: I) -> Result<Artifacts, Failure>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Failure::new(EXIT_SCHEMA, e))?;
    run(&cli)
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
