//! Contrastive adapter fine-tuning.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::PositivePair;
use crate::checkpoint::save_adapters;
use crate::contrastive::infonce_grad;
use crate::corpus::{save_pairs, LabeledDataset};
use crate::embed::prepare;
use crate::eval::cluster_eval;
use crate::lora::{AdaptedModel, AdapterSet, Mode};
use crate::model::{DropoutSampler, TensorMut, TensorRef, Trace};
use crate::pooling::{pool_gradient, pool_masked, PoolingKind, PoolingStrategy};
use crate::prompts::PromptTemplate;
use crate::tensor::{splitmix, Matrix};
use crate::tokenizer::Vocabulary;
use crate::{Error, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus has {pairs} pairs, fewer than the batch size {batch}")]
    CorpusTooSmall { pairs: usize, batch: usize },
    #[error("non-finite loss at step {step}{}", .dump.as_ref().map(|p| format!("; batch written to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: usize, dump: Option<PathBuf> },
    #[error("optimizer shape mismatch on {name}: {expected} vs {got}")]
    Shape {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub dropout_p: f64,
    pub max_steps: usize,
    /// Save the adapters every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Validate every this many steps (and before the first); 0 disables.
    pub eval_every: usize,
    pub seed: u64,
    /// Pooling used for validation. Training pools without normalization
    /// since the loss is cosine-based.
    pub pooling: PoolingStrategy,
    pub template: Option<String>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 120,
            temperature: 0.2,
            dropout_p: 0.05,
            max_steps: 100,
            checkpoint_every: 0,
            eval_every: 10,
            seed: 0,
            pooling: PoolingStrategy::new(PoolingKind::Mean),
            template: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl AdamW {
    pub fn step<T: Scalar>(
        &self,
        params: Vec<TensorMut<'_, T>>,
        grads: &[TensorRef<'_, T>],
        state: &mut AdamState<T>,
    ) -> Result<(), TrainError> {
        let mismatch = |name: &str, expected, got| TrainError::Shape {
            name: name.to_string(),
            expected,
            got,
        };
        if params.len() != grads.len() {
            return Err(mismatch("tensor count", params.len(), grads.len()));
        }
        if state.m.is_empty() {
            state.m = params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
            state.v = state.m.clone();
        }
        if state.m.len() != params.len() {
            return Err(mismatch("moment count", state.m.len(), params.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
            if p.data.len() != g.data.len() {
                return Err(mismatch(&p.name, p.data.len(), g.data.len()));
            }
            if p.data.len() != m.len() {
                return Err(mismatch(&p.name, m.len(), p.data.len()));
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - T::lit(self.beta1.powi(t));
        let c2 = one - T::lit(self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let decay = one - lr * T::lit(self.weight_decay);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Epoch-wise seeded shuffling; the incomplete tail of an epoch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if n < batch_size {
            return Err(TrainError::CorpusTooSmall {
                pairs: n,
                batch: batch_size,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5eed));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            pos: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        batch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of step `i + 1` at index `i`.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_score: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub steps: usize,
    pub epochs: usize,
}

/// One side of a pair after the forward pass.
struct Encoded<T> {
    trace: Trace<T>,
    pooled: Vec<T>,
    content: Option<std::ops::Range<usize>>,
    eos_position: Option<usize>,
}

pub struct Trainer<'a, T: Scalar> {
    pub vocab: &'a Vocabulary,
    pub template: Option<&'a PromptTemplate>,
    pub config: TrainConfig,
    pub validation: Option<&'a LabeledDataset>,
    /// Where checkpoints and diagnostics go; nothing is written when unset.
    pub out_dir: Option<&'a Path>,
    /// Recorded in adapter checkpoints as the base model reference.
    pub base_id: Option<String>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(vocab: &'a Vocabulary, template: Option<&'a PromptTemplate>, config: TrainConfig) -> Self {
        Self {
            vocab,
            template,
            config,
            validation: None,
            out_dir: None,
            base_id: None,
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn with_validation(mut self, data: &'a LabeledDataset) -> Self {
        self.validation = Some(data);
        self
    }

    pub fn with_out_dir(mut self, dir: &'a Path) -> Self {
        self.out_dir = Some(dir);
        self
    }

    fn train_pooling(&self) -> PoolingStrategy {
        PoolingStrategy {
            normalize: false,
            ..self.config.pooling
        }
    }

    fn dropout_seed(&self, step: usize, seq: usize) -> u64 {
        splitmix(splitmix(self.config.seed ^ 0xd20b) ^ ((step as u64) << 32 | seq as u64))
    }

    fn encode(&self, model: &AdaptedModel<T>, text: &str, step: usize, seq: usize) -> Result<Encoded<T>, Error> {
        let pooling = self.train_pooling();
        let p = prepare(self.vocab, self.template, text, pooling)?;
        let trace = if self.config.dropout_p > 0.0 {
            let mut sampler = DropoutSampler::new(self.config.dropout_p, self.dropout_seed(step, seq));
            model.forward_trace(Some(&mut sampler), &p.ids)?
        } else {
            model.forward_trace(None, &p.ids)?
        };
        let pooled = pool_masked(trace.hidden(), pooling, p.eos_position, p.content.as_ref())?.values;
        Ok(Encoded {
            trace,
            pooled,
            content: p.content,
            eos_position: p.eos_position,
        })
    }

    /// Loss of one batch and the summed adapter gradient.
    pub fn batch_gradient(
        &self,
        model: &AdaptedModel<T>,
        batch: &[&PositivePair],
        step: usize,
    ) -> Result<(T, AdapterSet<T>), Error> {
        let texts: Vec<&str> = batch
            .iter()
            .map(|p| p.anchor.as_str())
            .chain(batch.iter().map(|p| p.positive.as_str()))
            .collect();
        let encoded = texts
            .par_iter()
            .enumerate()
            .map(|(i, t)| self.encode(model, t, step, i))
            .collect::<Result<Vec<_>, _>>()?;
        let b = batch.len();
        let rows: Vec<Vec<T>> = encoded.iter().map(|e| e.pooled.clone()).collect();
        let anchors = Matrix::from_rows(&rows[..b]);
        let positives = Matrix::from_rows(&rows[b..]);
        let out = infonce_grad(&anchors, &positives, T::lit(self.config.temperature))?;

        let pooling = self.train_pooling();
        let grads = encoded
            .par_iter()
            .enumerate()
            .map(|(i, e)| -> Result<AdapterSet<T>, Error> {
                let upstream = if i < b {
                    out.grad_anchors.row(i)
                } else {
                    out.grad_positives.row(i - b)
                };
                let g = pool_gradient(
                    pooling,
                    upstream,
                    e.trace.hidden(),
                    e.eos_position,
                    e.content.as_ref(),
                )?;
                Ok(model.adapter_backward(&e.trace, &g)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut total = model.adapters.zeros_like();
        for g in &grads {
            total.accumulate(g);
        }
        Ok((out.loss, total))
    }

    fn validate(&self, model: &mut AdaptedModel<T>) -> Result<Option<f64>, Error> {
        let Some(data) = self.validation else {
            return Ok(None);
        };
        model.set_mode(Mode::Eval);
        let report = cluster_eval(
            &*model,
            self.vocab,
            data,
            self.template,
            self.config.pooling,
            self.config.seed,
        )?;
        Ok(Some(report.v_measure))
    }

    fn dump_batch(&self, batch: &[&PositivePair], step: usize) -> Option<PathBuf> {
        let dir = self.out_dir?;
        let path = dir.join(format!("nonfinite_step{step}.jsonl"));
        let pairs: Vec<PositivePair> = batch.iter().map(|&p| p.clone()).collect();
        match save_pairs(&path, &pairs) {
            Ok(()) => Some(path),
            Err(e) => {
                log::error!("could not dump offending batch: {e}");
                None
            }
        }
    }

    fn save(&self, model: &AdaptedModel<T>, adapters: &AdapterSet<T>, name: &str) -> Result<Option<PathBuf>, Error> {
        let Some(dir) = self.out_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        save_adapters(model.spec(), adapters, self.base_id.as_deref(), &path)?;
        Ok(Some(path))
    }

    /// Runs `max_steps` optimizer steps on the adapters of `model`, leaving
    /// the best-scoring adapters (first maximum) in place on return.
    pub fn train(&self, model: &mut AdaptedModel<T>, pairs: &[PositivePair]) -> Result<TrainReport, Error> {
        self.config.validate()?;
        let cfg = &self.config;
        let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed)?;
        if let Some(dir) = self.out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let optimizer = cfg.optimizer();
        let mut state = AdamState::default();
        let mut report = TrainReport {
            losses: Vec::new(),
            evals: Vec::new(),
            best_step: 0,
            best_score: None,
            best_checkpoint: None,
            checkpoints: Vec::new(),
            steps: 0,
            epochs: 0,
        };
        let mut best_adapters = model.adapters.clone();
        let eval_enabled = cfg.eval_every > 0 && self.validation.is_some();

        if eval_enabled {
            if let Some(score) = self.validate(model)? {
                report.evals.push(EvalPoint { step: 0, score });
                report.best_score = Some(score);
                log::info!("step 0 validation {score:.4}");
            }
        }

        for step in 1..=cfg.max_steps {
            model.set_mode(Mode::Train);
            let idx = sampler.next_batch();
            let batch: Vec<&PositivePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = match self.batch_gradient(model, &batch, step) {
                Ok(v) => v,
                Err(Error::Contrastive(e)) => {
                    log::error!("step {step}: {e}");
                    return Err(TrainError::NonFiniteLoss {
                        step,
                        dump: self.dump_batch(&batch, step),
                    }
                    .into());
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    dump: self.dump_batch(&batch, step),
                }
                .into());
            }
            let grad_refs = grads.tensors();
            optimizer.step(model.adapters.tensors_mut(), &grad_refs, &mut state)?;
            report.losses.push(loss.as_f64());
            report.steps = step;
            log::debug!("step {step} loss {:.6}", loss.as_f64());

            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let adapters = model.adapters.clone();
                if let Some(p) = self.save(model, &adapters, &format!("step_{step:06}.adapter.ckpt"))? {
                    report.checkpoints.push(p);
                }
            }
            if eval_enabled && step % cfg.eval_every == 0 {
                if let Some(score) = self.validate(model)? {
                    log::info!("step {step} loss {:.4} validation {score:.4}", loss.as_f64());
                    report.evals.push(EvalPoint { step, score });
                    if report.best_score.is_none_or(|b| score > b) {
                        report.best_score = Some(score);
                        report.best_step = step;
                        best_adapters = model.adapters.clone();
                    }
                }
            }
        }
        report.epochs = sampler.epoch() + usize::from(report.steps > 0);
        if !eval_enabled {
            report.best_step = report.steps;
            best_adapters = model.adapters.clone();
        }
        model.adapters = best_adapters;
        model.set_mode(Mode::Eval);
        if report.steps > 0 {
            report.best_checkpoint = self.save(model, &model.adapters.clone(), "best.adapter.ckpt")?;
        }
        Ok(report)
    }
}
