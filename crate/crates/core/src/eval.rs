//! Clustering and linear-probe evaluation of embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledDataset;
use crate::embed::Encoder;
use crate::model::Backbone;
use crate::pooling::PoolingStrategy;
use crate::prompts::PromptTemplate;
use crate::tensor::Matrix;
use crate::tokenizer::Vocabulary;
use crate::{Error, Scalar};

pub const KMEANS_MAX_ITERS: usize = 300;
pub const PROBE_EPOCHS: usize = 100;
pub const PROBE_LEARNING_RATE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("no points")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite embedding values")]
    NonFinite,
    #[error("training set has a single class")]
    SingleClass,
    #[error("test label {0} never appears in the training set")]
    UnseenLabel(usize),
}

/// Plain f64 rows, the working representation of the evaluators.
fn to_rows<T: Scalar>(m: &Matrix<T>) -> Result<Vec<Vec<f64>>, EvalError> {
    if !m.is_finite() {
        return Err(EvalError::NonFinite);
    }
    Ok((0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.as_f64()).collect())
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn update_centroids(points: &[Vec<f64>], assign: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// a fixpoint or `max_iters` is reached. An emptied cluster takes over the
/// point farthest from its centroid.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, EvalError> {
    let pts = to_rows(points)?;
    kmeans_rows(&pts, k, seed, max_iters)
}

fn kmeans_rows(pts: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, EvalError> {
    let n = pts.len();
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if k > n {
        return Err(EvalError::TooManyClusters { k, n });
    }
    let dim = pts[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(pts, k, &mut rng);
    let mut assign: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let (mut next, mut counts) = update_centroids(pts, &assign, k, dim);
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(&pts[a], &next[assign[a]])
                        .total_cmp(&sq_dist(&pts[b], &next[assign[b]]))
                        .then(b.cmp(&a))
                })
                .expect("k <= n leaves a cluster with two points");
            assign[far] = empty;
            let (c, n2) = update_centroids(pts, &assign, k, dim);
            next = c;
            counts = n2;
        }
        centroids = next;
        history.push(
            pts.iter()
                .zip(&assign)
                .map(|(p, &a)| sq_dist(p, &centroids[a]))
                .sum(),
        );
        let reassigned: Vec<usize> = pts
            .iter()
            .zip(&assign)
            .map(|(p, &a)| {
                let (best, d) = nearest(p, &centroids);
                // keep the current cluster on ties
                if d < sq_dist(p, &centroids[a]) {
                    best
                } else {
                    a
                }
            })
            .collect();
        if reassigned == assign {
            break;
        }
        assign = reassigned;
    }
    Ok(KMeansResult {
        assignments: assign,
        centroids,
        inertia_history: history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub v_measure: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub n_clusters: usize,
    pub seed: u64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean. `seed` is left at 0;
/// callers that cluster fill it in.
pub fn v_measure(labels_true: &[usize], labels_pred: &[usize]) -> Result<ClusteringReport, EvalError> {
    if labels_true.len() != labels_pred.len() {
        return Err(EvalError::LengthMismatch(labels_true.len(), labels_pred.len()));
    }
    if labels_true.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = labels_true.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut clusters: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in labels_true.iter().zip(labels_pred) {
        *joint.entry((c, k)).or_default() += 1;
        *classes.entry(c).or_default() += 1;
        *clusters.entry(k).or_default() += 1;
    }
    let h_c = entropy(classes.values().copied(), n);
    let h_k = entropy(clusters.values().copied(), n);
    let mut h_c_given_k = 0.0;
    let mut h_k_given_c = 0.0;
    for (&(c, k), &nck) in &joint {
        let p = nck as f64 / n;
        h_c_given_k -= p * (nck as f64 / clusters[&k] as f64).ln();
        h_k_given_c -= p * (nck as f64 / classes[&c] as f64).ln();
    }
    let homogeneity = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(ClusteringReport {
        v_measure: v,
        homogeneity,
        completeness,
        n_clusters: clusters.len(),
        seed: 0,
    })
}

/// Row order that depends only on dataset content.
pub fn canonical_order(dataset: &LabeledDataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.sort_by(|&a, &b| {
        dataset.texts()[a]
            .cmp(&dataset.texts()[b])
            .then(dataset.labels()[a].cmp(&dataset.labels()[b]))
    });
    idx
}

/// k-means with k = number of distinct labels, scored by V-measure.
pub fn cluster_embeddings<T: Scalar>(
    embeddings: &Matrix<T>,
    labels: &[usize],
    seed: u64,
) -> Result<ClusteringReport, EvalError> {
    if embeddings.rows() != labels.len() {
        return Err(EvalError::LengthMismatch(embeddings.rows(), labels.len()));
    }
    let k = labels.iter().collect::<BTreeSet<_>>().len();
    let km = kmeans(embeddings, k, seed, KMEANS_MAX_ITERS)?;
    let mut report = v_measure(labels, &km.assignments)?;
    report.n_clusters = k;
    report.seed = seed;
    Ok(report)
}

/// Embeddings of a labeled dataset in canonical row order, with the labels
/// in the same order.
pub fn embed_dataset<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    vocab: &Vocabulary,
    dataset: &LabeledDataset,
    template: Option<&PromptTemplate>,
    pooling: PoolingStrategy,
) -> Result<(Matrix<T>, Vec<usize>), Error> {
    let order = canonical_order(dataset);
    let texts: Vec<&str> = order.iter().map(|&i| dataset.texts()[i].as_str()).collect();
    let labels = order.iter().map(|&i| dataset.labels()[i]).collect();
    let enc = Encoder::new(backbone, vocab, template, pooling);
    Ok((enc.embed_all(&texts)?, labels))
}

pub fn cluster_eval<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    vocab: &Vocabulary,
    dataset: &LabeledDataset,
    template: Option<&PromptTemplate>,
    pooling: PoolingStrategy,
    seed: u64,
) -> Result<ClusteringReport, Error> {
    dataset.check_for_eval()?;
    let (emb, labels) = embed_dataset(backbone, vocab, dataset, template, pooling)?;
    Ok(cluster_embeddings(&emb, &labels, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][pred]`, indexed like `per_class`.
    pub confusion: Vec<Vec<usize>>,
    pub train_size: usize,
    pub test_size: usize,
}

/// Multinomial logistic regression fitted by per-example SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    classes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    z.iter_mut().for_each(|v| *v /= total);
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], epochs: usize, lr: f64, seed: u64) -> Result<Self, EvalError> {
        if x.len() != y.len() {
            return Err(EvalError::LengthMismatch(x.len(), y.len()));
        }
        if x.is_empty() {
            return Err(EvalError::Empty);
        }
        let classes: Vec<usize> = y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.len() < 2 {
            return Err(EvalError::SingleClass);
        }
        let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let dim = x[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Normal::new(0.0, 0.01).expect("valid normal");
        let mut weights: Vec<Vec<f64>> = (0..classes.len())
            .map(|_| (0..dim).map(|_| init.sample(&mut rng)).collect())
            .collect();
        let mut bias = vec![0.0; classes.len()];
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut probs = vec![0.0; classes.len()];
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                for (c, p) in probs.iter_mut().enumerate() {
                    *p = bias[c] + weights[c].iter().zip(&x[i]).map(|(w, v)| w * v).sum::<f64>();
                }
                softmax_in_place(&mut probs);
                let target = index[&y[i]];
                for (c, &p) in probs.iter().enumerate() {
                    let g = p - f64::from(u8::from(c == target));
                    bias[c] -= lr * g;
                    for (w, v) in weights[c].iter_mut().zip(&x[i]) {
                        *w -= lr * g * v;
                    }
                }
            }
        }
        Ok(Self {
            classes,
            weights,
            bias,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let scores = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>());
        let mut best = (0, f64::NEG_INFINITY);
        for (c, s) in scores.enumerate() {
            if s > best.1 {
                best = (c, s);
            }
        }
        self.classes[best.0]
    }
}

/// Fits a probe on the training embeddings and scores it on the test ones.
pub fn classify_embeddings<T: Scalar>(
    train_x: &Matrix<T>,
    train_y: &[usize],
    test_x: &Matrix<T>,
    test_y: &[usize],
    seed: u64,
) -> Result<ClassificationReport, EvalError> {
    let train_rows = to_rows(train_x)?;
    let test_rows = to_rows(test_x)?;
    if test_rows.len() != test_y.len() {
        return Err(EvalError::LengthMismatch(test_rows.len(), test_y.len()));
    }
    let seen: BTreeSet<usize> = train_y.iter().copied().collect();
    if seen.len() < 2 {
        return Err(EvalError::SingleClass);
    }
    if let Some(&bad) = test_y.iter().find(|l| !seen.contains(l)) {
        return Err(EvalError::UnseenLabel(bad));
    }
    let probe = LogisticProbe::fit(&train_rows, train_y, PROBE_EPOCHS, PROBE_LEARNING_RATE, seed)?;
    let classes = probe.classes().to_vec();
    let pos: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut confusion = vec![vec![0usize; classes.len()]; classes.len()];
    for (x, &y) in test_rows.iter().zip(test_y) {
        confusion[pos[&y]][pos[&probe.predict(x)]] += 1;
    }
    let correct: usize = (0..classes.len()).map(|i| confusion[i][i]).sum();
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let support: usize = confusion[i].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[i]).sum();
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            ClassMetrics {
                label,
                precision: ratio(confusion[i][i], predicted),
                recall: ratio(confusion[i][i], support),
                support,
            }
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: if test_y.is_empty() { 0.0 } else { correct as f64 / test_y.len() as f64 },
        per_class,
        confusion,
        train_size: train_rows.len(),
        test_size: test_rows.len(),
    })
}

pub fn classify_eval<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    vocab: &Vocabulary,
    train: &LabeledDataset,
    test: &LabeledDataset,
    template: Option<&PromptTemplate>,
    pooling: PoolingStrategy,
    seed: u64,
) -> Result<ClassificationReport, Error> {
    let (train_x, train_y) = embed_dataset(backbone, vocab, train, template, pooling)?;
    let (test_x, test_y) = embed_dataset(backbone, vocab, test, template, pooling)?;
    Ok(classify_embeddings(&train_x, &train_y, &test_x, &test_y, seed)?)
}
