//! Low-rank adapters on the projection sites of a frozen transformer.
//!
//! An adapted projection computes `x·W + (alpha/rank) · dropout(x)·Aᵀ·Bᵀ`
//! with `A: rank×in` and `B: out×rank`. `B` starts at zero, so a freshly
//! attached model is exactly the base model. The key projection is never
//! adapted.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Backbone, DropoutSampler, ForwardOutput, ModelConfig, ModelError, Site, TensorMut, TensorRef,
    Trace, Transformer,
};
use crate::tensor::{fnv1a, Matrix, FNV_OFFSET};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum LoraError {
    #[error("unknown projection site {0:?}")]
    UnknownSite(String),
    #[error("the key projection cannot carry an adapter")]
    KeySite,
    #[error("invalid LoRA spec: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub sites: BTreeSet<Site>,
}

/// The six adaptable projections.
pub const DEFAULT_SITES: [Site; 6] = [Site::Q, Site::V, Site::O, Site::Gate, Site::Up, Site::Down];

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout_p: 0.05,
            sites: DEFAULT_SITES.into_iter().collect(),
        }
    }
}

impl LoraSpec {
    pub fn validate(&self) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::Invalid("rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(LoraError::Invalid(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !self.alpha.is_finite() {
            return Err(LoraError::Invalid("alpha must be finite".into()));
        }
        if self.sites.is_empty() {
            return Err(LoraError::Invalid("at least one site required".into()));
        }
        if self.sites.contains(&Site::K) {
            return Err(LoraError::KeySite);
        }
        Ok(())
    }

    /// Parses site names such as `["q", "v"]`.
    pub fn parse_sites<S: AsRef<str>>(names: &[S]) -> Result<BTreeSet<Site>, LoraError> {
        names
            .iter()
            .map(|n| {
                let n = n.as_ref().trim();
                let site: Site = n.parse().map_err(|_| LoraError::UnknownSite(n.into()))?;
                if site == Site::K {
                    return Err(LoraError::KeySite);
                }
                Ok(site)
            })
            .collect()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `Σ_layers Σ_sites rank·(in + out)`
    pub fn trainable_count(&self, config: &ModelConfig) -> usize {
        config.n_layers
            * self
                .sites
                .iter()
                .map(|&s| {
                    let (i, o) = config.site_dims(s);
                    self.rank * (i + o)
                })
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T> {
    /// rank × in
    pub a: Matrix<T>,
    /// out × rank
    pub b: Matrix<T>,
}

/// Adapter factors for every (layer, site). Also the container for their
/// gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T> {
    rank: usize,
    scale: T,
    layers: Vec<[Option<LowRank<T>>; 7]>,
}

impl<T: Scalar> AdapterSet<T> {
    /// All-zero factors with the shapes implied by `spec`.
    pub fn zeros(config: &ModelConfig, spec: &LoraSpec) -> Self {
        let layers = (0..config.n_layers)
            .map(|_| {
                Site::ALL.map(|s| {
                    spec.sites.contains(&s).then(|| {
                        let (i, o) = config.site_dims(s);
                        LowRank {
                            a: Matrix::zeros(spec.rank, i),
                            b: Matrix::zeros(o, spec.rank),
                        }
                    })
                })
            })
            .collect();
        Self {
            rank: spec.rank,
            scale: T::lit(spec.scale()),
            layers,
        }
    }

    /// `A ~ N(0, 1/in)`, `B = 0`.
    pub fn init(config: &ModelConfig, spec: &LoraSpec, seed: u64) -> Self {
        let mut set = Self::zeros(config, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut set.layers {
            for lr in layer.iter_mut().flatten() {
                let dist = Normal::new(0.0, 1.0 / (lr.a.cols() as f64).sqrt()).expect("std > 0");
                for v in lr.a.as_mut_slice() {
                    *v = T::lit(dist.sample(&mut rng));
                }
            }
        }
        set
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            scale: self.scale,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.clone().map(|o| {
                        o.map(|lr| LowRank {
                            a: Matrix::zeros(lr.a.rows(), lr.a.cols()),
                            b: Matrix::zeros(lr.b.rows(), lr.b.cols()),
                        })
                    })
                })
                .collect(),
        }
    }

    #[inline]
    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn get(&self, layer: usize, site: Site) -> Option<&LowRank<T>> {
        self.layers.get(layer)?[site.index()].as_ref()
    }

    #[inline]
    pub fn get_mut(&mut self, layer: usize, site: Site) -> Option<&mut LowRank<T>> {
        self.layers.get_mut(layer)?[site.index()].as_mut()
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for (s, lr) in Site::ALL.iter().zip(layer) {
                if let Some(lr) = lr {
                    for (tag, m) in [("A", &lr.a), ("B", &lr.b)] {
                        out.push(TensorRef {
                            name: format!("lora.{li}.{s}.{tag}"),
                            shape: vec![m.rows(), m.cols()],
                            data: m.as_slice(),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (s, lr) in Site::ALL.iter().zip(layer.iter_mut()) {
                if let Some(lr) = lr {
                    let LowRank { a, b } = lr;
                    for (tag, m) in [("A", a), ("B", b)] {
                        let shape = vec![m.rows(), m.cols()];
                        out.push(TensorMut {
                            name: format!("lora.{li}.{s}.{tag}"),
                            shape,
                            data: m.as_mut_slice(),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Elementwise `self += other`; both sets must share one layout.
    pub fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(dst.shape, src.shape, "adapter layouts differ");
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        let mut buf = Vec::new();
        for t in self.tensors() {
            buf.clear();
            for &v in t.data {
                v.write_le(&mut buf);
            }
            h = fnv1a(&buf, h);
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// A frozen base model with trainable adapters.
#[derive(Debug)]
pub struct AdaptedModel<T> {
    base: Transformer<T>,
    spec: LoraSpec,
    pub adapters: AdapterSet<T>,
    mode: Mode,
    dropout_seed: u64,
    dropout_calls: AtomicU64,
}

impl<T: Scalar> Clone for AdaptedModel<T> {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            spec: self.spec.clone(),
            adapters: self.adapters.clone(),
            mode: self.mode,
            dropout_seed: self.dropout_seed,
            dropout_calls: AtomicU64::new(self.dropout_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> AdaptedModel<T> {
    /// Attaches fresh adapters (B = 0) to `base`. Starts in eval mode.
    pub fn attach(base: Transformer<T>, spec: LoraSpec, seed: u64) -> Result<Self, LoraError> {
        spec.validate()?;
        let adapters = AdapterSet::init(&base.config, &spec, seed);
        Ok(Self {
            base,
            spec,
            adapters,
            mode: Mode::Eval,
            dropout_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
            dropout_calls: AtomicU64::new(0),
        })
    }

    /// Reassembles a model from a base and previously trained adapters.
    pub fn from_parts(base: Transformer<T>, spec: LoraSpec, adapters: AdapterSet<T>) -> Result<Self, LoraError> {
        spec.validate()?;
        Ok(Self {
            base,
            spec,
            adapters,
            mode: Mode::Eval,
            dropout_seed: 0,
            dropout_calls: AtomicU64::new(0),
        })
    }

    pub fn base(&self) -> &Transformer<T> {
        &self.base
    }

    pub fn spec(&self) -> &LoraSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.param_count()
    }

    /// Forward with an explicit dropout sampler (train mode) or none (eval).
    pub fn forward_trace(
        &self,
        dropout: Option<&mut DropoutSampler>,
        ids: &[u32],
    ) -> Result<Trace<T>, ModelError> {
        self.base.forward_with(Some(&self.adapters), dropout, ids)
    }

    /// Gradients for the adapter factors only.
    pub fn adapter_backward(
        &self,
        trace: &Trace<T>,
        upstream: &Matrix<T>,
    ) -> Result<AdapterSet<T>, ModelError> {
        let (_, g) = self
            .base
            .backward_with(Some(&self.adapters), trace, upstream, false)?;
        Ok(g.expect("adapters present"))
    }

    /// Plain parameters with every adapter folded into its base weight:
    /// `W + scale · Aᵀ·Bᵀ`.
    pub fn merge(&self) -> Transformer<T> {
        let mut merged = self.base.clone();
        let scale = self.adapters.scale();
        for (li, layer) in merged.layers.iter_mut().enumerate() {
            for s in Site::ALL {
                if let Some(lr) = self.adapters.get(li, s) {
                    let mut delta = lr.a.t_matmul(&lr.b.transpose());
                    delta.scale(scale);
                    layer.site_mut(s).add_assign(&delta);
                }
            }
        }
        merged
    }
}

impl<T: Scalar> Backbone<T> for AdaptedModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    /// In train mode each call draws fresh adapter-input dropout masks from a
    /// per-call seed; eval mode is deterministic.
    fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<T>, ModelError> {
        let trace = match self.mode {
            Mode::Eval => self.forward_trace(None, ids)?,
            Mode::Train => {
                let call = self.dropout_calls.fetch_add(1, Ordering::Relaxed);
                let mut sampler = DropoutSampler::new(
                    self.spec.dropout_p,
                    self.dropout_seed.wrapping_add(call.wrapping_mul(0x2545_f491_4f6c_dd1d)),
                );
                self.forward_trace(Some(&mut sampler), ids)?
            }
        };
        Ok(trace.into_output())
    }
}
