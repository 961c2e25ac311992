//! Toy decoder-only transformer: token embedding, pre-norm causal
//! self-attention with rotary positions, gated (gate/up/down) MLP, final norm.
//!
//! Weights are stored input-major: a projection maps `x (n×in)` to
//! `x · W (n×out)`.

mod forward;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::AdapterSet;
use crate::tensor::{fnv1a, Matrix, FNV_OFFSET};
use crate::Scalar;

pub use forward::{DropoutSampler, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} out of range for vocab_size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!(
                "head dimension {} must be even for rotary positions",
                self.head_dim()
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// (in, out) dimensions of a projection site.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Q | Site::K | Site::V | Site::O => (self.d_model, self.d_model),
            Site::Gate | Site::Up => (self.d_model, self.d_ff),
            Site::Down => (self.d_ff, self.d_model),
        }
    }

    pub fn param_count(&self) -> usize {
        let per_layer: usize = Site::ALL
            .iter()
            .map(|&s| {
                let (i, o) = self.site_dims(s);
                i * o
            })
            .sum::<usize>()
            + 2 * self.d_model;
        self.vocab_size * self.d_model + self.n_layers * per_layer + self.d_model
    }
}

/// The seven projection sites of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Site {
    pub const ALL: [Site; 7] = [
        Site::Q,
        Site::K,
        Site::V,
        Site::O,
        Site::Gate,
        Site::Up,
        Site::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Gate => "gate",
            Site::Up => "up",
            Site::Down => "down",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| format!("unknown projection site {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub norm1: Vec<T>,
    pub norm2: Vec<T>,
    /// Indexed by [`Site::index`].
    pub proj: [Matrix<T>; 7],
}

impl<T: Scalar> Layer<T> {
    #[inline]
    pub fn site(&self, s: Site) -> &Matrix<T> {
        &self.proj[s.index()]
    }

    #[inline]
    pub fn site_mut(&mut self, s: Site) -> &mut Matrix<T> {
        &mut self.proj[s.index()]
    }
}

/// Model parameters. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Vec<T>,
}

pub type ParameterGradients<T> = Transformer<T>;

/// One named tensor, borrowed.
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Scalar> Transformer<T> {
    /// Seeded scaled-normal init: embeddings ~ N(0, 1), projections
    /// ~ N(0, 1/in_dim), norm scales 1.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols)
                .map(|_| T::lit(dist.sample(&mut rng)))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let embedding = normal(config.vocab_size, config.d_model, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| {
                let proj = Site::ALL.map(|s| {
                    let (i, o) = config.site_dims(s);
                    normal(i, o, 1.0 / (i as f64).sqrt())
                });
                Layer {
                    norm1: vec![T::one(); config.d_model],
                    norm2: vec![T::one(); config.d_model],
                    proj,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            final_norm: vec![T::one(); config.d_model],
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        Self {
            config: c.clone(),
            embedding: Matrix::zeros(c.vocab_size, c.d_model),
            layers: (0..c.n_layers)
                .map(|_| Layer {
                    norm1: vec![T::zero(); c.d_model],
                    norm2: vec![T::zero(); c.d_model],
                    proj: Site::ALL.map(|s| {
                        let (i, o) = c.site_dims(s);
                        Matrix::zeros(i, o)
                    }),
                })
                .collect(),
            final_norm: vec![T::zero(); c.d_model],
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = vec![TensorRef {
            name: "embedding".into(),
            shape: vec![self.embedding.rows(), self.embedding.cols()],
            data: self.embedding.as_slice(),
        }];
        for (i, l) in self.layers.iter().enumerate() {
            for s in Site::ALL {
                let m = l.site(s);
                out.push(TensorRef {
                    name: format!("layers.{i}.{s}"),
                    shape: vec![m.rows(), m.cols()],
                    data: m.as_slice(),
                });
            }
            out.push(TensorRef {
                name: format!("layers.{i}.norm1"),
                shape: vec![l.norm1.len()],
                data: &l.norm1,
            });
            out.push(TensorRef {
                name: format!("layers.{i}.norm2"),
                shape: vec![l.norm2.len()],
                data: &l.norm2,
            });
        }
        out.push(TensorRef {
            name: "final_norm".into(),
            shape: vec![self.final_norm.len()],
            data: &self.final_norm,
        });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = vec![TensorMut {
            name: "embedding".into(),
            shape: vec![self.embedding.rows(), self.embedding.cols()],
            data: self.embedding.as_mut_slice(),
        }];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let Layer { norm1, norm2, proj } = l;
            for (s, m) in Site::ALL.into_iter().zip(proj.iter_mut()) {
                let shape = vec![m.rows(), m.cols()];
                out.push(TensorMut {
                    name: format!("layers.{i}.{s}"),
                    shape,
                    data: m.as_mut_slice(),
                });
            }
            out.push(TensorMut {
                name: format!("layers.{i}.norm1"),
                shape: vec![norm1.len()],
                data: norm1,
            });
            out.push(TensorMut {
                name: format!("layers.{i}.norm2"),
                shape: vec![norm2.len()],
                data: norm2,
            });
        }
        let n = self.final_norm.len();
        out.push(TensorMut {
            name: "final_norm".into(),
            shape: vec![n],
            data: &mut self.final_norm,
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Bit-exact fingerprint of every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        let mut buf = Vec::new();
        for t in self.tensors() {
            buf.clear();
            buf.extend_from_slice(t.name.as_bytes());
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

    /// Runs the forward pass keeping every intermediate needed by
    /// [`Transformer::backward`].
    pub fn forward_trace(&self, ids: &[u32]) -> Result<Trace<T>, ModelError> {
        forward::run_forward(self, None, None, ids)
    }

    /// Gradient of `Σ upstream ⊙ hidden` with respect to every parameter.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        upstream: &Matrix<T>,
    ) -> Result<ParameterGradients<T>, ModelError> {
        let (g, _) = forward::run_backward(self, None, trace, upstream, true)?;
        Ok(g.expect("base gradients requested"))
    }

    /// Recomputes the forward pass for `ids`, then back-propagates.
    pub fn backward_from_ids(
        &self,
        ids: &[u32],
        upstream: &Matrix<T>,
    ) -> Result<ParameterGradients<T>, ModelError> {
        let trace = self.forward_trace(ids)?;
        self.backward(&trace, upstream)
    }

    /// Forward with optional adapters and adapter-input dropout.
    pub fn forward_with(
        &self,
        adapters: Option<&AdapterSet<T>>,
        dropout: Option<&mut DropoutSampler>,
        ids: &[u32],
    ) -> Result<Trace<T>, ModelError> {
        forward::run_forward(self, adapters, dropout, ids)
    }

    /// Backward with optional adapters. Returns (base grads if requested,
    /// adapter grads if adapters are present).
    pub fn backward_with(
        &self,
        adapters: Option<&AdapterSet<T>>,
        trace: &Trace<T>,
        upstream: &Matrix<T>,
        want_base: bool,
    ) -> Result<(Option<ParameterGradients<T>>, Option<AdapterSet<T>>), ModelError> {
        forward::run_backward(self, adapters, trace, upstream, want_base)
    }
}

/// Final-layer hidden states, one row per input token.
pub type HiddenStates<T> = Matrix<T>;

/// Attention weights indexed `[layer][head]`, each `seq_len × seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub layers: Vec<Vec<Matrix<T>>>,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn last_layer(&self) -> &[Matrix<T>] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub hidden: HiddenStates<T>,
    pub attention: AttentionMaps<T>,
}

/// Anything that maps token ids to final hidden states: the base model or
/// a model with adapters attached.
pub trait Backbone<T: Scalar>: Sync {
    fn config(&self) -> &ModelConfig;

    fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<T>, ModelError>;
}

impl<T: Scalar> Backbone<T> for Transformer<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<T>, ModelError> {
        Ok(self.forward_trace(ids)?.into_output())
    }
}
