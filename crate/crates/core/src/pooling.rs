//! Reduce per-token hidden states to one sentence vector.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot, l2_norm, Matrix};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PoolingError {
    #[error("cannot pool an empty sequence")]
    Empty,
    #[error("eos_token pooling needs the position of the appended EOS token")]
    MissingEos,
    #[error("position {pos} out of range for sequence of length {len}")]
    OutOfRange { pos: usize, len: usize },
    #[error("invalid pooling mask {start}..{end} for length {len}")]
    BadMask { start: usize, end: usize, len: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("unknown pooling strategy {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Mean,
    LastToken,
    EosToken,
}

impl PoolingKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Mean => "mean",
            PoolingKind::LastToken => "last_token",
            PoolingKind::EosToken => "eos_token",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingKind {
    type Err = PoolingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(PoolingKind::Mean),
            "last" | "last_token" => Ok(PoolingKind::LastToken),
            "eos" | "eos_token" => Ok(PoolingKind::EosToken),
            other => Err(PoolingError::Unknown(other.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingStrategy {
    pub kind: PoolingKind,
    /// L2-normalize the pooled vector.
    pub normalize: bool,
    /// Mean-pool only over the original text's tokens, excluding prompt
    /// tokens. Ignored by the single-position strategies.
    pub content_only: bool,
}

impl Default for PoolingStrategy {
    fn default() -> Self {
        Self::new(PoolingKind::Mean)
    }
}

impl PoolingStrategy {
    pub fn new(kind: PoolingKind) -> Self {
        Self {
            kind,
            normalize: true,
            content_only: false,
        }
    }

    pub fn raw(kind: PoolingKind) -> Self {
        Self {
            normalize: false,
            ..Self::new(kind)
        }
    }

    pub fn needs_eos(&self) -> bool {
        self.kind == PoolingKind::EosToken
    }
}

impl From<PoolingKind> for PoolingStrategy {
    fn from(kind: PoolingKind) -> Self {
        Self::new(kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub values: Vec<T>,
    pub source_len: usize,
    pub strategy: PoolingStrategy,
}

pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>, PoolingError> {
    let n = l2_norm(v);
    if n == T::zero() || !n.is_finite() {
        return Err(PoolingError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Rows averaged by mean pooling: all rows, or `mask` when given.
fn mean_rows(len: usize, mask: Option<&Range<usize>>) -> Result<Range<usize>, PoolingError> {
    match mask {
        None => Ok(0..len),
        Some(m) if m.start < m.end && m.end <= len => Ok(m.clone()),
        Some(m) => Err(PoolingError::BadMask {
            start: m.start,
            end: m.end,
            len,
        }),
    }
}

fn selected_row(
    kind: PoolingKind,
    len: usize,
    eos_position: Option<usize>,
) -> Result<usize, PoolingError> {
    match kind {
        PoolingKind::LastToken => Ok(len - 1),
        PoolingKind::EosToken => {
            let pos = eos_position.ok_or(PoolingError::MissingEos)?;
            if pos >= len {
                return Err(PoolingError::OutOfRange { pos, len });
            }
            Ok(pos)
        }
        PoolingKind::Mean => unreachable!("mean pools many rows"),
    }
}

pub fn pool<T: Scalar>(
    hidden: &Matrix<T>,
    strategy: PoolingStrategy,
    eos_position: Option<usize>,
) -> Result<Embedding<T>, PoolingError> {
    pool_masked(hidden, strategy, eos_position, None)
}

/// `content` restricts mean pooling to a token range when
/// `strategy.content_only` is set.
pub fn pool_masked<T: Scalar>(
    hidden: &Matrix<T>,
    strategy: PoolingStrategy,
    eos_position: Option<usize>,
    content: Option<&Range<usize>>,
) -> Result<Embedding<T>, PoolingError> {
    let len = hidden.rows();
    if len == 0 {
        return Err(PoolingError::Empty);
    }
    let values = match strategy.kind {
        PoolingKind::Mean => {
            let rows = mean_rows(len, content.filter(|_| strategy.content_only))?;
            let count = T::from_usize_lossy(rows.len());
            let mut acc = vec![T::zero(); hidden.cols()];
            for i in rows {
                for (a, &h) in acc.iter_mut().zip(hidden.row(i)) {
                    *a += h;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count);
            acc
        }
        kind => hidden.row(selected_row(kind, len, eos_position)?).to_vec(),
    };
    let values = if strategy.normalize {
        l2_normalize(&values)?
    } else {
        values
    };
    Ok(Embedding {
        values,
        source_len: len,
        strategy,
    })
}

/// Gradient of the pooled vector (normalized when the strategy says so)
/// with respect to `hidden`, given the upstream gradient on that vector.
pub fn pool_gradient<T: Scalar>(
    strategy: PoolingStrategy,
    upstream: &[T],
    hidden: &Matrix<T>,
    eos_position: Option<usize>,
    content: Option<&Range<usize>>,
) -> Result<Matrix<T>, PoolingError> {
    let seq_len = hidden.rows();
    if seq_len == 0 {
        return Err(PoolingError::Empty);
    }
    let upstream = if strategy.normalize {
        let raw = pool_masked(hidden, PoolingStrategy { normalize: false, ..strategy }, eos_position, content)?.values;
        let norm = l2_norm(&raw);
        if norm == T::zero() || !norm.is_finite() {
            return Err(PoolingError::ZeroVector);
        }
        // (I - u uᵀ) g / ‖v‖ with u = v / ‖v‖
        let u: Vec<T> = raw.iter().map(|&x| x / norm).collect();
        let proj = dot(&u, upstream);
        upstream
            .iter()
            .zip(&u)
            .map(|(&g, &ui)| (g - proj * ui) / norm)
            .collect()
    } else {
        upstream.to_vec()
    };
    let mut g = Matrix::zeros(seq_len, upstream.len());
    match strategy.kind {
        PoolingKind::Mean => {
            let rows = mean_rows(seq_len, content.filter(|_| strategy.content_only))?;
            let inv = T::one() / T::from_usize_lossy(rows.len());
            for i in rows {
                for (o, &u) in g.row_mut(i).iter_mut().zip(&upstream) {
                    *o = u * inv;
                }
            }
        }
        kind => {
            let row = selected_row(kind, seq_len, eos_position)?;
            g.row_mut(row).copy_from_slice(&upstream);
        }
    }
    Ok(g)
}
