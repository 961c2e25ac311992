//! In-batch contrastive objective over cosine similarities.
//!
//! Row `i` of the anchors is pulled toward row `i` of the positives and
//! pushed away from every other positive in the batch:
//!
//! `loss = mean_i [ logsumexp_j(cos(a_i, p_j) / t) - cos(a_i, p_i) / t ]`

use thiserror::Error;

use crate::tensor::{dot, l2_norm, Matrix};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ContrastiveError {
    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("anchor shape {anchors:?} does not match positive shape {positives:?}")]
    ShapeMismatch {
        anchors: (usize, usize),
        positives: (usize, usize),
    },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("zero vector at {which} row {row}")]
    ZeroVector { which: &'static str, row: usize },
    #[error("vectors have different lengths ({0} vs {1})")]
    Length(usize, usize),
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_sim<T: Scalar>(u: &[T], v: &[T]) -> Result<T, ContrastiveError> {
    if u.len() != v.len() {
        return Err(ContrastiveError::Length(u.len(), v.len()));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == T::zero() {
        return Err(ContrastiveError::ZeroVector { which: "u", row: 0 });
    }
    if nv == T::zero() {
        return Err(ContrastiveError::ZeroVector { which: "v", row: 0 });
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a, T> {
    anchors: &'a Matrix<T>,
    positives: &'a Matrix<T>,
    temperature: T,
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub per_example: Vec<T>,
    /// Gradient with respect to the raw (unnormalized) anchors.
    pub grad_anchors: Matrix<T>,
    /// Gradient with respect to the raw (unnormalized) positives.
    pub grad_positives: Matrix<T>,
}

struct Normalized<T> {
    unit: Matrix<T>,
    norms: Vec<T>,
}

fn normalize_rows<T: Scalar>(
    m: &Matrix<T>,
    which: &'static str,
) -> Result<Normalized<T>, ContrastiveError> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for row in 0..m.rows() {
        let n = l2_norm(m.row(row));
        if n == T::zero() {
            return Err(ContrastiveError::ZeroVector { which, row });
        }
        unit.row_mut(row).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

/// Backprop through `x / |x|` row by row.
fn through_normalization<T: Scalar>(g_unit: &Matrix<T>, n: &Normalized<T>) -> Matrix<T> {
    let mut out = g_unit.clone();
    for r in 0..out.rows() {
        let u = n.unit.row(r);
        let proj = dot(g_unit.row(r), u);
        let inv = T::one() / n.norms[r];
        for (o, &uv) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - uv * proj) * inv;
        }
    }
    out
}

impl<'a, T: Scalar> ContrastiveBatch<'a, T> {
    pub fn new(
        anchors: &'a Matrix<T>,
        positives: &'a Matrix<T>,
        temperature: T,
    ) -> Result<Self, ContrastiveError> {
        if anchors.shape() != positives.shape() {
            return Err(ContrastiveError::ShapeMismatch {
                anchors: anchors.shape(),
                positives: positives.shape(),
            });
        }
        if anchors.rows() < 2 {
            return Err(ContrastiveError::BatchTooSmall(anchors.rows()));
        }
        if !(temperature > T::zero() && temperature.is_finite()) {
            return Err(ContrastiveError::Temperature(temperature.as_f64()));
        }
        if !anchors.is_finite() {
            return Err(ContrastiveError::NonFinite("anchors"));
        }
        if !positives.is_finite() {
            return Err(ContrastiveError::NonFinite("positives"));
        }
        Ok(Self {
            anchors,
            positives,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine similarity matrix, anchors by positives.
    pub fn similarities(&self) -> Result<Matrix<T>, ContrastiveError> {
        let a = normalize_rows(self.anchors, "anchors")?;
        let p = normalize_rows(self.positives, "positives")?;
        Ok(clamp(&a.unit.matmul_t(&p.unit)))
    }

    pub fn loss(&self) -> Result<T, ContrastiveError> {
        Ok(self.evaluate(false)?.loss)
    }

    pub fn loss_and_grad(&self) -> Result<LossOutput<T>, ContrastiveError> {
        self.evaluate(true)
    }

    fn evaluate(&self, with_grad: bool) -> Result<LossOutput<T>, ContrastiveError> {
        let b = self.len();
        let a = normalize_rows(self.anchors, "anchors")?;
        let p = normalize_rows(self.positives, "positives")?;
        let sims = a.unit.matmul_t(&p.unit);
        let inv_t = T::one() / self.temperature;
        let bt = T::from_usize_lossy(b);

        let mut per_example = Vec::with_capacity(b);
        // d loss / d sim, filled row by row.
        let mut g_sim = Matrix::zeros(b, b);
        for i in 0..b {
            let logits: Vec<T> = sims.row(i).iter().map(|&s| s * inv_t).collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            per_example.push(max + total.ln() - logits[i]);
            if with_grad {
                for (j, g) in g_sim.row_mut(i).iter_mut().enumerate() {
                    let target = if i == j { T::one() } else { T::zero() };
                    *g = (exps[j] / total - target) * inv_t / bt;
                }
            }
        }
        let loss = per_example.iter().copied().sum::<T>() / bt;
        if !loss.is_finite() {
            return Err(ContrastiveError::NonFinite("loss"));
        }

        let (grad_anchors, grad_positives) = if with_grad {
            let ga = g_sim.matmul(&p.unit);
            let gp = g_sim.t_matmul(&a.unit);
            (
                through_normalization(&ga, &a),
                through_normalization(&gp, &p),
            )
        } else {
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0))
        };
        Ok(LossOutput {
            loss,
            per_example,
            grad_anchors,
            grad_positives,
        })
    }
}

fn clamp<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|v| v.max(-T::one()).min(T::one()))
}

pub fn infonce_loss<T: Scalar>(
    anchors: &Matrix<T>,
    positives: &Matrix<T>,
    temperature: T,
) -> Result<T, ContrastiveError> {
    ContrastiveBatch::new(anchors, positives, temperature)?.loss()
}

pub fn infonce_grad<T: Scalar>(
    anchors: &Matrix<T>,
    positives: &Matrix<T>,
    temperature: T,
) -> Result<LossOutput<T>, ContrastiveError> {
    ContrastiveBatch::new(anchors, positives, temperature)?.loss_and_grad()
}
