//! Positive-pair generation: word-level perturbations plus translation and
//! paraphrase services.

mod client;

pub use client::{
    extract_sentence, FlakyService, HttpService, IdentityService, MockParaphraser, MockTranslator,
    RetryPolicy, ScriptedService, ServiceError, TextService, TopicParaphraser,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::splitmix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("probability {name} must be in [0, 1), got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("paraphrase prompt id {0} out of range (0..5)")]
    PromptId(usize),
    #[error("service gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: usize, last: ServiceError },
    #[error("service error: {0}")]
    Service(ServiceError),
    #[error("service returned an empty response")]
    EmptyResponse,
    #[error("service response has {len} characters, limit is {max}")]
    Overlong { len: usize, max: usize },
    #[error("positive is identical to the anchor")]
    IdenticalPositive,
    #[error("method {0} needs a client that was not configured")]
    MissingClient(AugmentMethod),
    #[error("no input texts")]
    NoTexts,
    #[error("unknown augmentation method {0:?}")]
    UnknownMethod(String),
}

impl AugmentError {
    /// True when every retry against a reachable-but-failing service was used up.
    pub fn is_exhaustion(&self) -> bool {
        matches!(self, AugmentError::Exhausted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Deletion,
    Swap,
    CharNoise,
    BackTranslation,
    LlmParaphrase,
    /// Anchor reused as its own positive; an ablation baseline.
    Identity,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 6] = [
        AugmentMethod::Deletion,
        AugmentMethod::Swap,
        AugmentMethod::CharNoise,
        AugmentMethod::BackTranslation,
        AugmentMethod::LlmParaphrase,
        AugmentMethod::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentMethod::Deletion => "deletion",
            AugmentMethod::Swap => "swap",
            AugmentMethod::CharNoise => "char_noise",
            AugmentMethod::BackTranslation => "back_translation",
            AugmentMethod::LlmParaphrase => "llm_paraphrase",
            AugmentMethod::Identity => "identity",
        }
    }

    pub fn is_local(self) -> bool {
        !matches!(self, AugmentMethod::BackTranslation | AugmentMethod::LlmParaphrase)
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentMethod {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugmentMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AugmentError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositivePair {
    pub anchor: String,
    pub positive: String,
    pub method: AugmentMethod,
    #[serde(default)]
    pub prompt_id: Option<usize>,
    pub seed: u64,
}

/// How several requested methods combine for one text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Every method yields its own pair.
    #[default]
    Independent,
    /// Local perturbations are applied on top of each service positive
    /// (or chained on the anchor when no service method is requested).
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub deletion_p: f64,
    pub char_noise_p: f64,
    pub source_language: String,
    pub pivot_language: String,
    /// Paraphrase prompts used for each text.
    pub paraphrase_prompts: Vec<usize>,
    pub max_response_chars: usize,
    /// Keep service positives identical to their anchor.
    pub allow_identity: bool,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub composition: Composition,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            deletion_p: 0.10,
            char_noise_p: 0.05,
            source_language: "en".into(),
            pivot_language: "de".into(),
            paraphrase_prompts: (0..PARAPHRASE_PROMPTS.len()).collect(),
            max_response_chars: 1024,
            allow_identity: false,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            composition: Composition::Independent,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        check_probability("deletion_p", self.deletion_p)?;
        check_probability("char_noise_p", self.char_noise_p)?;
        if let Some(&bad) = self.paraphrase_prompts.iter().find(|&&i| i >= PARAPHRASE_PROMPTS.len()) {
            return Err(AugmentError::PromptId(bad));
        }
        Ok(())
    }
}

fn check_probability(name: &'static str, value: f64) -> Result<(), AugmentError> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(AugmentError::Probability { name, value })
    }
}

/// Paraphrase requests; `[X]` is replaced by the sentence.
pub const PARAPHRASE_PROMPTS: [&str; 5] = [
    "Rewrite the following sentence with more detail, keeping the original meaning. Respond with only the rewritten sentence: \"[X]\"",
    "Paraphrase this sentence using simpler language. Respond with only the rewritten sentence: \"[X]\"",
    "You’re a high school teacher. Explain this sentence to your students in your own words. Respond with only the explanation: \"[X]\"",
    "Write a metaphor that expresses the same idea as this sentence. Respond with only the metaphor: \"[X]\"",
    "After reading this sentence, what is a natural question someone might ask? Respond with only the question: \"[X]\"",
];

pub fn paraphrase_prompt(text: &str, prompt_id: usize) -> Result<String, AugmentError> {
    let pattern = PARAPHRASE_PROMPTS
        .get(prompt_id)
        .ok_or(AugmentError::PromptId(prompt_id))?;
    Ok(pattern.replacen("[X]", text, 1))
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Drops each word with probability `p`; never returns an empty string for
/// non-empty input.
pub fn random_deletion(text: &str, p: f64, seed: u64) -> String {
    let w = words(text);
    if w.is_empty() {
        return String::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<&str> = w
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= p)
        .collect();
    if kept.is_empty() {
        return w[rng.random_range(0..w.len())].to_string();
    }
    kept.join(" ")
}

/// Exchanges exactly one pair of distinct word positions.
pub fn random_swap(text: &str, seed: u64) -> String {
    let mut w = words(text);
    if w.len() >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i = rng.random_range(0..w.len());
        let mut j = rng.random_range(0..w.len() - 1);
        if j >= i {
            j += 1;
        }
        w.swap(i, j);
    }
    w.join(" ")
}

/// With probability `p` per word, transposes one adjacent character pair.
pub fn char_noise(text: &str, p: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words(text)
        .into_iter()
        .map(|word| {
            let hit = rng.random::<f64>() < p;
            let mut chars: Vec<char> = word.chars().collect();
            if hit && chars.len() >= 2 {
                let k = rng.random_range(0..chars.len() - 1);
                chars.swap(k, k + 1);
            }
            chars.into_iter().collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Source to pivot and back through a translation service.
pub fn back_translate(
    text: &str,
    service: &dyn TextService,
    config: &AugmentConfig,
) -> Result<String, AugmentError> {
    let forward = serde_json::json!({
        "text": text,
        "source": config.source_language,
        "target": config.pivot_language,
    });
    let pivot = checked_response(
        config.retry.call(service, &forward)?,
        config.max_response_chars,
    )?;
    let back = serde_json::json!({
        "text": pivot,
        "source": config.pivot_language,
        "target": config.source_language,
    });
    checked_response(config.retry.call(service, &back)?, config.max_response_chars)
}

pub fn llm_paraphrase(
    text: &str,
    prompt_id: usize,
    service: &dyn TextService,
    config: &AugmentConfig,
) -> Result<String, AugmentError> {
    let prompt = paraphrase_prompt(text, prompt_id)?;
    let request = serde_json::json!({ "prompt": prompt });
    checked_response(config.retry.call(service, &request)?, config.max_response_chars)
}

fn checked_response(raw: String, max_chars: usize) -> Result<String, AugmentError> {
    let cleaned = strip_response(&raw);
    if cleaned.is_empty() {
        return Err(AugmentError::EmptyResponse);
    }
    let len = cleaned.chars().count();
    if len > max_chars {
        return Err(AugmentError::Overlong { len, max: max_chars });
    }
    Ok(cleaned.to_string())
}

/// Trims whitespace and any surrounding quote characters.
pub fn strip_response(raw: &str) -> &str {
    const QUOTES: &[char] = &['"', '\'', '“', '”', '‘', '’', '«', '»'];
    let mut s = raw.trim();
    loop {
        let next = s.trim_matches(QUOTES).trim();
        if next == s {
            return s;
        }
        s = next;
    }
}

/// Services available to `build_pair_corpus`.
#[derive(Clone, Copy, Default)]
pub struct Clients<'a> {
    pub translator: Option<&'a dyn TextService>,
    pub paraphraser: Option<&'a dyn TextService>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub index: usize,
    pub method: AugmentMethod,
    pub prompt_id: Option<usize>,
    pub error: String,
    pub exhausted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairCorpus {
    pub pairs: Vec<PositivePair>,
    pub failures: Vec<ItemFailure>,
    /// Service positives dropped for being identical to their anchor.
    pub filtered: usize,
}

/// Seed of one (text, method, prompt) job, independent of evaluation order.
pub fn item_seed(seed: u64, index: usize, method: AugmentMethod, prompt_id: Option<usize>) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [index as u64, method.code(), prompt_id.map_or(u64::MAX, |p| p as u64)] {
        h = splitmix(h ^ v);
    }
    h
}

fn apply_local(text: &str, method: AugmentMethod, config: &AugmentConfig, seed: u64) -> String {
    match method {
        AugmentMethod::Deletion => random_deletion(text, config.deletion_p, seed),
        AugmentMethod::Swap => random_swap(text, seed),
        AugmentMethod::CharNoise => char_noise(text, config.char_noise_p, seed),
        AugmentMethod::Identity => text.to_string(),
        _ => unreachable!("not a local method"),
    }
}

struct Job {
    index: usize,
    method: AugmentMethod,
    prompt_id: Option<usize>,
    /// Local methods stacked on top of the positive.
    extra: Vec<AugmentMethod>,
}

fn plan(n_texts: usize, methods: &[AugmentMethod], config: &AugmentConfig) -> Vec<Job> {
    let mut unique: Vec<AugmentMethod> = Vec::new();
    for &m in methods {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    let (service, local): (Vec<_>, Vec<_>) = unique.iter().partition(|m| !m.is_local());
    let stacked = config.composition == Composition::Stacked;
    let mut jobs = Vec::new();
    for index in 0..n_texts {
        let push_service = |jobs: &mut Vec<Job>, method: AugmentMethod, extra: Vec<AugmentMethod>| {
            if method == AugmentMethod::LlmParaphrase {
                for &p in &config.paraphrase_prompts {
                    jobs.push(Job { index, method, prompt_id: Some(p), extra: extra.clone() });
                }
            } else {
                jobs.push(Job { index, method, prompt_id: None, extra });
            }
        };
        if stacked && !service.is_empty() {
            for &m in &service {
                push_service(&mut jobs, m, local.clone());
            }
        } else if stacked && !local.is_empty() {
            let last = *local.last().unwrap();
            jobs.push(Job {
                index,
                method: last,
                prompt_id: None,
                extra: local[..local.len() - 1].to_vec(),
            });
        } else {
            for &m in &unique {
                push_service(&mut jobs, m, Vec::new());
            }
        }
    }
    jobs
}

/// One pair per text and method (one per prompt for paraphrasing). Service
/// failures are collected instead of aborting the run; output order follows
/// the input order regardless of concurrency.
pub fn build_pair_corpus(
    texts: &[String],
    methods: &[AugmentMethod],
    config: &AugmentConfig,
    clients: Clients<'_>,
    seed: u64,
) -> Result<PairCorpus, AugmentError> {
    config.validate()?;
    if texts.is_empty() {
        return Err(AugmentError::NoTexts);
    }
    for &m in methods {
        let missing = match m {
            AugmentMethod::BackTranslation => clients.translator.is_none(),
            AugmentMethod::LlmParaphrase => clients.paraphraser.is_none(),
            _ => false,
        };
        if missing {
            return Err(AugmentError::MissingClient(m));
        }
    }

    let jobs = plan(texts.len(), methods, config);
    let run = |job: &Job| -> (u64, Result<String, AugmentError>) {
        let seed = item_seed(seed, job.index, job.method, job.prompt_id);
        let text = &texts[job.index];
        let mut positive = match job.method {
            AugmentMethod::BackTranslation => back_translate(text, clients.translator.unwrap(), config),
            AugmentMethod::LlmParaphrase => {
                llm_paraphrase(text, job.prompt_id.unwrap(), clients.paraphraser.unwrap(), config)
            }
            m if job.extra.is_empty() => Ok(apply_local(text, m, config, seed)),
            // chained locals are applied below
            _ => Ok(text.clone()),
        };
        if let Ok(p) = &mut positive {
            let mut stack = job.extra.clone();
            if job.method.is_local() && !job.extra.is_empty() {
                stack.push(job.method);
            }
            for (k, &m) in stack.iter().enumerate() {
                *p = apply_local(p, m, config, splitmix(seed ^ (k as u64 + 1)));
            }
        }
        (seed, positive)
    };

    let threads = config.max_in_flight.max(1);
    let results: Vec<(u64, Result<String, AugmentError>)> = if jobs.iter().any(|j| !j.method.is_local()) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.par_iter().map(run).collect()
    };

    let mut out = PairCorpus::default();
    for (job, (seed, result)) in jobs.iter().zip(results) {
        match result {
            Ok(positive) => {
                let service = !job.method.is_local();
                if service && positive == texts[job.index] && !config.allow_identity {
                    out.filtered += 1;
                    continue;
                }
                out.pairs.push(PositivePair {
                    anchor: texts[job.index].clone(),
                    positive,
                    method: job.method,
                    prompt_id: job.prompt_id,
                    seed,
                });
            }
            Err(e) => out.failures.push(ItemFailure {
                index: job.index,
                method: job.method,
                prompt_id: job.prompt_id,
                exhausted: e.is_exhaustion(),
                error: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
