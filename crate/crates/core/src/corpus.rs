//! Datasets on disk and a synthetic topic-clustered text generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::PositivePair;

const MAX_REPORTED: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    Missing(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed records: {}", format_lines(.lines))]
    Schema {
        path: PathBuf,
        /// (1-based line number, message), at most five entries.
        lines: Vec<(usize, String)>,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("word {word:?} appears in pool {first} and pool {second}")]
    OverlappingPools {
        word: String,
        first: String,
        second: String,
    },
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(n, m)| format!("line {n}: {m}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Raw,
    Pairs,
    Labeled,
}

impl FromStr for DatasetKind {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(DatasetKind::Raw),
            "pairs" => Ok(DatasetKind::Pairs),
            "labeled" => Ok(DatasetKind::Labeled),
            other => Err(CorpusError::Invalid(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    texts: Vec<String>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        texts: Vec<String>,
        labels: Vec<usize>,
    ) -> Result<Self, CorpusError> {
        if texts.len() != labels.len() {
            return Err(CorpusError::Invalid(format!(
                "{} texts but {} labels",
                texts.len(),
                labels.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            texts,
            labels,
        })
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.label_set().len()
    }

    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &l in &self.labels {
            *h.entry(l).or_insert(0) += 1;
        }
        h
    }

    /// Clustering and classification need at least two classes.
    pub fn check_for_eval(&self) -> Result<(), CorpusError> {
        if self.n_classes() < 2 {
            return Err(CorpusError::Invalid(format!(
                "dataset {:?} has {} distinct label(s), need at least 2",
                self.name,
                self.n_classes()
            )));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.texts.iter().map(String::as_str).zip(self.labels.iter().copied())
    }

    /// Seeded shuffle, then the first `train_fraction` of rows go to train.
    pub fn split_train_test(&self, train_fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let take = |idx: &[usize], split| LabeledDataset {
            name: self.name.clone(),
            split,
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        };
        (take(&order[..cut], Split::Train), take(&order[cut..], Split::Test))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Raw(Vec<String>),
    Pairs(Vec<PositivePair>),
    Labeled(LabeledDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Raw(t) => t.len(),
            Dataset::Pairs(p) => p.len(),
            Dataset::Labeled(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    text: String,
}

#[derive(Serialize, Deserialize)]
struct LabeledRecord {
    text: String,
    label: usize,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::Missing(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Parses every non-blank line, collecting the first five failures.
fn parse_lines<R: serde::de::DeserializeOwned>(
    path: &Path,
    bytes: &[u8],
    check: impl Fn(&R) -> Result<(), String>,
) -> Result<Vec<R>, CorpusError> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let parsed = std::str::from_utf8(raw)
            .map_err(|e| format!("invalid UTF-8: {e}"))
            .and_then(|line| {
                if line.trim().is_empty() {
                    return Ok(None);
                }
                let record: R = serde_json::from_str(line).map_err(|e| e.to_string())?;
                check(&record)?;
                Ok(Some(record))
            });
        match parsed {
            Ok(Some(r)) => out.push(r),
            Ok(None) => {}
            Err(msg) => {
                bad.push((line_no, msg));
                if bad.len() == MAX_REPORTED {
                    break;
                }
            }
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(CorpusError::Schema {
            path: path.to_path_buf(),
            lines: bad,
        })
    }
}

fn non_empty(field: &str, value: &str) -> Result<(), String> {
    if value.trim().is_empty() {
        Err(format!("field {field:?} is empty"))
    } else {
        Ok(())
    }
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Vec<String>, CorpusError> {
    let path = path.as_ref();
    let records: Vec<RawRecord> = parse_lines(path, &read_bytes(path)?, |r: &RawRecord| non_empty("text", &r.text))?;
    Ok(records.into_iter().map(|r| r.text).collect())
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<PositivePair>, CorpusError> {
    let path = path.as_ref();
    let pairs = parse_lines(path, &read_bytes(path)?, |p: &PositivePair| {
        non_empty("anchor", &p.anchor)?;
        non_empty("positive", &p.positive)?;
        match p.prompt_id {
            Some(id) if id >= crate::augment::PARAPHRASE_PROMPTS.len() => {
                Err(format!("prompt_id {id} out of range"))
            }
            _ => Ok(()),
        }
    })?;
    if pairs.is_empty() {
        log::warn!("pair corpus {} is empty", path.display());
    }
    Ok(pairs)
}

pub fn load_labeled(path: impl AsRef<Path>, split: Split) -> Result<LabeledDataset, CorpusError> {
    let path = path.as_ref();
    let records: Vec<LabeledRecord> =
        parse_lines(path, &read_bytes(path)?, |r: &LabeledRecord| non_empty("text", &r.text))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (texts, labels) = records.into_iter().map(|r| (r.text, r.label)).unzip();
    LabeledDataset::new(name, split, texts, labels)
}

pub fn load_jsonl(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Dataset, CorpusError> {
    Ok(match kind {
        DatasetKind::Raw => Dataset::Raw(load_raw(path)?),
        DatasetKind::Pairs => Dataset::Pairs(load_pairs(path)?),
        DatasetKind::Labeled => Dataset::Labeled(load_labeled(path, Split::Train)?),
    })
}

fn write_lines<R: Serialize>(path: &Path, records: impl Iterator<Item = R>) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn save_raw(path: impl AsRef<Path>, texts: &[String]) -> Result<(), CorpusError> {
    write_lines(path.as_ref(), texts.iter().map(|t| RawRecord { text: t.clone() }))
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[PositivePair]) -> Result<(), CorpusError> {
    write_lines(path.as_ref(), pairs.iter())
}

pub fn save_labeled(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<(), CorpusError> {
    write_lines(
        path.as_ref(),
        data.iter().map(|(t, l)| LabeledRecord {
            text: t.to_string(),
            label: l,
        }),
    )
}

/// Recipe for a topic-clustered dataset: each cluster draws words from its
/// own pool, mixed with a shared pool at rate `mixture`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples_per_cluster: usize,
    pub cluster_pools: Vec<Vec<String>>,
    pub shared_pool: Vec<String>,
    /// Probability that a word is drawn from the shared pool.
    pub mixture: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

const SYLLABLES: [&str; 16] = [
    "ba", "ke", "mi", "no", "ru", "sa", "te", "vo", "zu", "li", "da", "fe", "go", "hu", "ji", "po",
];

/// A pronounceable pseudo-word, distinct for every index.
pub fn pseudo_word(index: usize) -> String {
    let mut n = index + SYLLABLES.len();
    let mut parts = Vec::new();
    while n > 0 {
        parts.push(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    parts.reverse();
    parts.concat()
}

impl SyntheticSpec {
    /// Pseudo-word pools: `n_clusters` pools of `words_per_cluster` words
    /// plus a shared pool of `shared_words`, all disjoint.
    pub fn with_generated_pools(
        n_clusters: usize,
        samples_per_cluster: usize,
        words_per_cluster: usize,
        shared_words: usize,
        mixture: f64,
        seed: u64,
    ) -> Self {
        let mut next = 0;
        let mut take = |n: usize| -> Vec<String> {
            let out = (next..next + n).map(pseudo_word).collect();
            next += n;
            out
        };
        let cluster_pools = (0..n_clusters).map(|_| take(words_per_cluster)).collect();
        let shared_pool = take(shared_words);
        Self {
            samples_per_cluster,
            cluster_pools,
            shared_pool,
            mixture,
            min_len: 6,
            max_len: 12,
            seed,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_pools.len()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |m: String| Err(CorpusError::Invalid(m));
        if self.cluster_pools.is_empty() {
            return invalid("need at least one cluster".into());
        }
        if self.cluster_pools.iter().any(Vec::is_empty) {
            return invalid("cluster pools must be non-empty".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return invalid(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.mixture) {
            return invalid(format!("mixture {} not in [0, 1]", self.mixture));
        }
        if self.mixture > 0.0 && self.shared_pool.is_empty() {
            return invalid("mixture > 0 needs a shared pool".into());
        }
        let mut owner: BTreeMap<&str, String> = BTreeMap::new();
        let named = self
            .cluster_pools
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("cluster {i}"), p))
            .chain(std::iter::once(("shared".to_string(), &self.shared_pool)));
        for (name, pool) in named {
            for w in pool {
                if w.split_whitespace().count() != 1 {
                    return invalid(format!("pool word {w:?} must be a single word"));
                }
                if let Some(first) = owner.get(w.as_str()) {
                    if *first != name {
                        return Err(CorpusError::OverlappingPools {
                            word: w.clone(),
                            first: first.clone(),
                            second: name,
                        });
                    }
                }
                owner.insert(w, name.clone());
            }
        }
        Ok(())
    }
}

/// Deterministic under `SyntheticSpec::seed`; rows are grouped by cluster and
/// labels equal the cluster index.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut texts = Vec::with_capacity(spec.n_clusters() * spec.samples_per_cluster);
    let mut labels = Vec::with_capacity(texts.capacity());
    for (label, pool) in spec.cluster_pools.iter().enumerate() {
        for _ in 0..spec.samples_per_cluster {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let from = if rng.random::<f64>() < spec.mixture {
                        &spec.shared_pool
                    } else {
                        pool
                    };
                    from[rng.random_range(0..from.len())].as_str()
                })
                .collect();
            texts.push(words.join(" "));
            labels.push(label);
        }
    }
    LabeledDataset::new("synthetic", Split::Train, texts, labels)
}
