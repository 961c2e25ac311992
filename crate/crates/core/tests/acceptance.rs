//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use embedlab::augment::{
    build_pair_corpus, char_noise, random_deletion, random_swap, AugmentConfig, AugmentMethod, Clients,
    MockParaphraser, MockTranslator, PositivePair,
};
use embedlab::cli::{self, FileDigest, RunManifest};
use embedlab::contrastive::{infonce_grad, infonce_loss};
use embedlab::corpus::{generate_synthetic, LabeledDataset, SyntheticSpec};
use embedlab::embed::prepare;
use embedlab::eval::{cluster_eval, kmeans, v_measure, KMEANS_MAX_ITERS};
use embedlab::lora::{AdaptedModel, AdapterSet, LoraSpec};
use embedlab::model::{Backbone, ModelConfig, Transformer};
use embedlab::pooling::{pool_gradient, pool_masked, PoolingKind, PoolingStrategy};
use embedlab::prompts::{self, builtin_templates, PromptTemplate};
use embedlab::tensor::Matrix;
use embedlab::tokenizer::Vocabulary;
use embedlab::trainer::{TrainConfig, TrainReport, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

// ---------------------------------------------------------------- 1

struct GradCase {
    base: Transformer<f64>,
    adapters: AdapterSet<f64>,
    vocab: Vocabulary,
    template: PromptTemplate,
    pooling: PoolingStrategy,
    anchors: Vec<&'static str>,
    positives: Vec<&'static str>,
    temperature: f64,
}

impl GradCase {
    fn embed_all(&self, base: &Transformer<f64>, adapters: &AdapterSet<f64>, texts: &[&str]) -> Matrix<f64> {
        let rows: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| {
                let p = prepare(&self.vocab, Some(&self.template), t, self.pooling).unwrap();
                let trace = base.forward_with(Some(adapters), None, &p.ids).unwrap();
                pool_masked(trace.hidden(), self.pooling, p.eos_position, p.content.as_ref())
                    .unwrap()
                    .values
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    fn loss(&self, base: &Transformer<f64>, adapters: &AdapterSet<f64>) -> f64 {
        let a = self.embed_all(base, adapters, &self.anchors);
        let p = self.embed_all(base, adapters, &self.positives);
        infonce_loss(&a, &p, self.temperature).unwrap()
    }

    fn analytic(&self) -> (Transformer<f64>, AdapterSet<f64>) {
        let texts: Vec<&str> = self.anchors.iter().chain(&self.positives).copied().collect();
        let prepared: Vec<_> = texts
            .iter()
            .map(|t| prepare(&self.vocab, Some(&self.template), t, self.pooling).unwrap())
            .collect();
        let traces: Vec<_> = prepared
            .iter()
            .map(|p| self.base.forward_with(Some(&self.adapters), None, &p.ids).unwrap())
            .collect();
        let pooled: Vec<Vec<f64>> = traces
            .iter()
            .zip(&prepared)
            .map(|(tr, p)| {
                pool_masked(tr.hidden(), self.pooling, p.eos_position, p.content.as_ref())
                    .unwrap()
                    .values
            })
            .collect();
        let b = self.anchors.len();
        let out = infonce_grad(
            &Matrix::from_rows(&pooled[..b]),
            &Matrix::from_rows(&pooled[b..]),
            self.temperature,
        )
        .unwrap();
        let mut base_total = self.base.zeros_like();
        let mut adapter_total = self.adapters.zeros_like();
        for (i, (tr, p)) in traces.iter().zip(&prepared).enumerate() {
            let up = if i < b { out.grad_anchors.row(i) } else { out.grad_positives.row(i - b) };
            let g = pool_gradient(self.pooling, up, tr.hidden(), p.eos_position, p.content.as_ref()).unwrap();
            let (gb, ga) = self.base.backward_with(Some(&self.adapters), tr, &g, true).unwrap();
            for (dst, src) in base_total.tensors_mut().into_iter().zip(gb.unwrap().tensors()) {
                for (d, s) in dst.data.iter_mut().zip(src.data) {
                    *d += *s;
                }
            }
            adapter_total.accumulate(&ga.unwrap());
        }
        (base_total, adapter_total)
    }

    /// Worst relative error per tensor over every scalar, central differences.
    fn check_all(&self, include_base: bool) -> Vec<(String, f64)> {
        let (gb, ga) = self.analytic();
        let h = 1e-5;
        let base_names: Vec<String> = self.base.tensors().iter().map(|t| t.name.clone()).collect();
        let adapter_names: Vec<String> = self.adapters.tensors().iter().map(|t| t.name.clone()).collect();
        let mut jobs: Vec<(bool, usize, String)> = Vec::new();
        if include_base {
            jobs.extend(base_names.iter().enumerate().map(|(i, n)| (true, i, n.clone())));
        }
        jobs.extend(adapter_names.iter().enumerate().map(|(i, n)| (false, i, n.clone())));
        jobs.par_iter()
            .map(|(is_base, ti, name)| {
                let mut base = self.base.clone();
                let mut adapters = self.adapters.clone();
                let analytic: Vec<f64> = if *is_base {
                    gb.tensors()[*ti].data.to_vec()
                } else {
                    ga.tensors()[*ti].data.to_vec()
                };
                let mut worst = 0.0f64;
                for (k, &a) in analytic.iter().enumerate() {
                    let mut eval_at = |delta: f64| {
                        let orig;
                        if *is_base {
                            let mut t = base.tensors_mut();
                            orig = t[*ti].data[k];
                            t[*ti].data[k] = orig + delta;
                        } else {
                            let mut t = adapters.tensors_mut();
                            orig = t[*ti].data[k];
                            t[*ti].data[k] = orig + delta;
                        }
                        let l = self.loss(&base, &adapters);
                        if *is_base {
                            base.tensors_mut()[*ti].data[k] = orig;
                        } else {
                            adapters.tensors_mut()[*ti].data[k] = orig;
                        }
                        l
                    };
                    let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                    worst = worst.max(rel_err(a, numeric));
                }
                (name.clone(), worst)
            })
            .collect()
    }
}

fn grad_case(pooling: PoolingStrategy) -> GradCase {
    let anchors = vec![
        "a man is driving a car",
        "the cat sat on the warm mat",
        "stocks fell sharply today",
        "heavy rain is expected tomorrow",
    ];
    let positives = vec![
        "a man drives a car",
        "a cat sat on a mat",
        "stocks dropped today",
        "expect rain tomorrow",
    ];
    let ccw = prompts::lookup("CCW").unwrap();
    let mut corpus: Vec<String> = anchors.iter().chain(&positives).map(|s| s.to_string()).collect();
    corpus.push(ccw.pattern.replace(prompts::PLACEHOLDER, " "));
    let vocab = Vocabulary::build(&corpus, 128).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        seed: 11,
    };
    let mut base = Transformer::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Norm gains away from 1 so their gradients are not special-cased by symmetry.
    for t in base.tensors_mut() {
        if t.name.contains("norm") {
            for v in t.data.iter_mut() {
                *v = rng.random_range(0.7..1.3);
            }
        }
    }
    let spec = LoraSpec {
        rank: 3,
        alpha: 6.0,
        dropout_p: 0.0,
        ..LoraSpec::default()
    };
    let mut adapters = AdapterSet::init(&cfg, &spec, 13);
    for t in adapters.tensors_mut() {
        if t.name.ends_with(".B") {
            for v in t.data.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    GradCase {
        base,
        adapters,
        vocab,
        template: ccw,
        pooling,
        anchors,
        positives,
        temperature: 0.2,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let case = grad_case(PoolingStrategy::new(PoolingKind::Mean));
    let mut results = case.check_all(true);
    for kind in [PoolingKind::LastToken, PoolingKind::EosToken] {
        let c = grad_case(PoolingStrategy::raw(kind));
        results.extend(
            c.check_all(false)
                .into_iter()
                .map(|(n, e)| (format!("{n}@{}", kind.name()), e)),
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mut by_kind: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (name, err) in &results {
        let kind = if name.starts_with("lora") {
            "lora"
        } else if name.contains("norm") {
            "norm"
        } else if name == "embedding" {
            "embedding"
        } else {
            "projection"
        };
        let e = by_kind.entry(kind).or_default();
        e.0 += 1;
        e.1 = e.1.max(*err);
    }
    let sites: std::collections::BTreeSet<&str> = results
        .iter()
        .filter(|(n, _)| n.starts_with("layers."))
        .filter_map(|(n, _)| n.split('.').nth(2))
        .filter(|s| !s.starts_with("norm"))
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let offenders: Vec<&str> = results.iter().filter(|r| r.1 >= 1e-4).map(|r| r.0.as_str()).collect();
    check(
        worst < 1e-4 && sites.len() == 7 && elapsed < 60.0 && by_kind.len() == 4,
        format!(
            "{} tensors ({} projection sites), worst rel err {worst:.2e} {by_kind:?}, {elapsed:.1}s{}",
            results.len(),
            sites.len(),
            if offenders.is_empty() { String::new() } else { format!(", failing: {offenders:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn small_vocab_and_data(seed: u64) -> (Vocabulary, LabeledDataset, Vec<PositivePair>) {
    let spec = SyntheticSpec::with_generated_pools(2, 24, 8, 4, 0.2, seed);
    let data = generate_synthetic(&spec).unwrap();
    let vocab = Vocabulary::build(data.texts(), 64).unwrap();
    let pairs = data
        .texts()
        .iter()
        .enumerate()
        .map(|(i, t)| PositivePair {
            anchor: t.clone(),
            positive: random_deletion(t, 0.1, i as u64),
            method: AugmentMethod::Deletion,
            prompt_id: None,
            seed: i as u64,
        })
        .collect();
    (vocab, data, pairs)
}

fn criterion_2() -> Outcome {
    let (vocab, _, pairs) = small_vocab_and_data(21);
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        seed: 22,
    };
    let base = Transformer::<f64>::init(&cfg).unwrap();
    let fresh = AdaptedModel::attach(base.clone(), LoraSpec::default(), 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut identical = true;
    for _ in 0..20 {
        let n = rng.random_range(1..20);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        identical &= fresh.forward(&ids).unwrap().hidden == base.forward(&ids).unwrap().hidden;
    }

    let mut trained = fresh.clone();
    for t in trained.adapters.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let merged = trained.merge();
    let mut worst_merge = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..25);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let a = trained.forward(&ids).unwrap().hidden;
        let m = merged.forward(&ids).unwrap().hidden;
        worst_merge = worst_merge.max(a.max_abs_diff(&m));
    }

    let mut model = AdaptedModel::attach(base.clone(), LoraSpec::default(), 25).unwrap();
    let before = model.base().checksum();
    let report = Trainer::new(
        &vocab,
        None,
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 200,
            eval_every: 0,
            ..TrainConfig::default()
        },
    )
    .train(&mut model, &pairs)
    .map_err(|e| e.to_string())?;
    let after = model.base().checksum();
    check(
        identical && worst_merge < 1e-5 && before == after && report.steps == 200,
        format!(
            "zero-init identical: {identical}; merge max diff {worst_merge:.2e} over 100 inputs; \
             backbone checksum {before:016x} -> {after:016x} after {} steps",
            report.steps
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut worst_degenerate = 0.0f64;
    for b in [2usize, 4, 8, 16, 120] {
        let a = Matrix::from_rows(&vec![vec![0.5, -1.0, 2.0, 0.25]; b]);
        let l = infonce_loss(&a, &a, 0.2).unwrap();
        worst_degenerate = worst_degenerate.max((l - (b as f64).ln()).abs());
    }
    let sep = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let l = infonce_loss(&sep, &sep, 0.2).unwrap();
    let expected = (1.0 + (-5.0f64).exp()).ln();
    let sep_err = (l - expected).abs();
    check(
        worst_degenerate < 1e-9 && sep_err < 1e-9,
        format!("degenerate |L - ln B| max {worst_degenerate:.1e}; separable B=2 loss {l:.12} vs {expected:.12}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        max_seq_len: 40,
        seed: 41,
    };
    let m = Transformer::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_row = 0.0f64;
    let mut causal = true;
    for _ in 0..50 {
        let n = rng.random_range(1..=40);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..30)).collect();
        let out = m.forward(&ids).unwrap();
        for layer in &out.attention.layers {
            for head in layer {
                for i in 0..n {
                    let row = head.row(i);
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    causal &= row[i + 1..].iter().all(|&w| w == 0.0);
                }
            }
        }
    }

    let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![-1.0, 0.5]]);
    let raw = |k| PoolingStrategy::raw(k);
    let mean = pool_masked(&h, raw(PoolingKind::Mean), None, None).unwrap().values;
    let last = pool_masked(&h, raw(PoolingKind::LastToken), None, None).unwrap().values;
    let eos = pool_masked(&h, raw(PoolingKind::EosToken), Some(2), None).unwrap().values;
    let content = pool_masked(
        &h,
        PoolingStrategy {
            content_only: true,
            ..raw(PoolingKind::Mean)
        },
        None,
        Some(&(1..3)),
    )
    .unwrap()
    .values;
    let unit: Vec<f64> = pool_masked(&Matrix::from_rows(&[vec![3.0, 0.0], vec![3.0, 8.0]]), PoolingStrategy::new(PoolingKind::Mean), None, None)
        .unwrap()
        .values;
    let arithmetic = mean == vec![2.0, 3.125]
        && last == vec![-1.0, 0.5]
        && eos == vec![5.0, 6.0]
        && content == vec![4.0, 5.0]
        && (unit[0] - 0.6).abs() < 1e-15
        && (unit[1] - 0.8).abs() < 1e-15;

    let mut worst_fd = 0.0f64;
    let strategies = [
        (PoolingStrategy::new(PoolingKind::Mean), None, None),
        (PoolingStrategy::raw(PoolingKind::Mean), None, None),
        (
            PoolingStrategy {
                content_only: true,
                ..PoolingStrategy::new(PoolingKind::Mean)
            },
            None,
            Some(1..4),
        ),
        (PoolingStrategy::new(PoolingKind::LastToken), None, None),
        (PoolingStrategy::new(PoolingKind::EosToken), Some(3), None),
    ];
    for (s, eos, span) in strategies {
        for trial in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
            let hs = random_matrix(6, 5, 1.0, &mut rng);
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |m: &Matrix<f64>| -> f64 {
                let v = pool_masked(m, s, eos, span.as_ref()).unwrap().values;
                v.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let g = pool_gradient(s, &w, &hs, eos, span.as_ref()).unwrap();
            let step = 1e-6;
            for i in 0..6 {
                for j in 0..5 {
                    let mut up = hs.clone();
                    up[(i, j)] += step;
                    let mut down = hs.clone();
                    down[(i, j)] -= step;
                    let numeric = (f(&up) - f(&down)) / (2.0 * step);
                    worst_fd = worst_fd.max((numeric - g[(i, j)]).abs());
                }
            }
        }
    }
    check(
        worst_row < 1e-5 && causal && arithmetic && worst_fd < 1e-7,
        format!(
            "attention row-sum error {worst_row:.1e}, causal zeros exact: {causal}; \
             pooling arithmetic: {arithmetic}; pool gradient max abs err {worst_fd:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let letters: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
    // Words of distinct letters, so every transposition is visible.
    let word = |rng: &mut ChaCha8Rng| -> String {
        let mut l = letters.clone();
        let n = rng.random_range(2..8);
        for i in 0..n {
            let j = rng.random_range(i..l.len());
            l.swap(i, j);
        }
        l[..n].iter().collect()
    };
    let texts: Vec<String> = (0..2000)
        .map(|_| (0..60).map(|_| word(&mut rng)).collect::<Vec<_>>().join(" "))
        .collect();
    let total: usize = texts.iter().map(|t| t.split(' ').count()).sum();

    let kept: usize = texts
        .iter()
        .enumerate()
        .map(|(i, t)| random_deletion(t, 0.10, 5000 + i as u64).split_whitespace().count())
        .sum();
    let del_rate = 1.0 - kept as f64 / total as f64;
    let del_sigma = (0.10 * 0.90 / total as f64).sqrt();

    let mut perturbed = 0usize;
    for (i, t) in texts.iter().enumerate() {
        let out = char_noise(t, 0.05, 9000 + i as u64);
        perturbed += t.split(' ').zip(out.split(' ')).filter(|(a, b)| a != b).count();
    }
    let noise_rate = perturbed as f64 / total as f64;
    let noise_sigma = (0.05 * 0.95 / total as f64).sqrt();

    let mut multiset_ok = 0;
    for i in 0..10_000u64 {
        let n = rng.random_range(1..15);
        let t: Vec<String> = (0..n).map(|_| letters[rng.random_range(0..6)].to_string()).collect();
        let t = t.join(" ");
        let out = random_swap(&t, i);
        let mut a: Vec<&str> = t.split(' ').collect();
        let mut b: Vec<&str> = out.split(' ').collect();
        a.sort_unstable();
        b.sort_unstable();
        multiset_ok += usize::from(a == b);
    }
    let del_z = (del_rate - 0.10) / del_sigma;
    let noise_z = (noise_rate - 0.05) / noise_sigma;
    check(
        total >= 100_000 && del_z.abs() <= 3.0 && noise_z.abs() <= 3.0 && multiset_ok == 10_000,
        format!(
            "{total} words: deletion rate {del_rate:.4} (z = {del_z:+.2}), char-noise rate {noise_rate:.4} \
             (z = {noise_z:+.2}); swap multisets preserved {multiset_ok}/10000"
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Restricted growth strings: every partition of `n` points exactly once.
fn labelings(n: usize) -> Vec<Vec<usize>> {
    fn grow(cur: &mut Vec<usize>, n: usize, max: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for v in 0..=max + 1 {
            cur.push(v);
            grow(cur, n, max.max(v), out);
            cur.pop();
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    grow(&mut vec![0], n, 0, &mut out);
    out
}

fn entropy_oracle(t: &[usize], p: &[usize]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ct: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cp: BTreeMap<usize, f64> = BTreeMap::new();
    for (&a, &b) in t.iter().zip(p) {
        *joint.entry((a, b)).or_default() += 1.0;
        *ct.entry(a).or_default() += 1.0;
        *cp.entry(b).or_default() += 1.0;
    }
    let h = |m: &BTreeMap<usize, f64>| -> f64 { -m.values().map(|&c| c / n * (c / n).ln()).sum::<f64>() };
    let h_c = h(&ct);
    let h_k = h(&cp);
    let h_c_given_k: f64 = -joint.iter().map(|(&(_, k), &c)| c / n * (c / cp[&k]).ln()).sum::<f64>();
    let h_k_given_c: f64 = -joint.iter().map(|(&(c_, _), &c)| c / n * (c / ct[&c_]).ln()).sum::<f64>();
    let hom = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let com = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    let v = if hom + com == 0.0 { 0.0 } else { 2.0 * hom * com / (hom + com) };
    (hom, com, v)
}

fn criterion_6() -> Outcome {
    let mut pairs = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=6 {
        let all = labelings(n);
        for t in &all {
            for p in &all {
                let r = v_measure(t, p).map_err(|e| e.to_string())?;
                let (h, c, v) = entropy_oracle(t, p);
                worst = worst
                    .max((r.homogeneity - h).abs())
                    .max((r.completeness - c).abs())
                    .max((r.v_measure - v).abs());
                pairs += 1;
            }
        }
    }

    let mut recovered = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..80 {
            let c = i % 2;
            let center = if c == 0 { -10.0 } else { 10.0 };
            rows.push((0..3).map(|_| center + noise.sample(&mut rng)).collect::<Vec<f64>>());
            truth.push(c);
        }
        let km = kmeans(&Matrix::from_rows(&rows), 2, seed, KMEANS_MAX_ITERS).map_err(|e| e.to_string())?;
        let same = km.assignments.iter().zip(&truth).all(|(&a, &t)| a == t);
        let flipped = km.assignments.iter().zip(&truth).all(|(&a, &t)| a != t);
        recovered += usize::from(same || flipped);
    }
    check(
        worst < 1e-12 && pairs == 44_168 && recovered == 20,
        format!("{pairs} labeling pairs (n <= 6), max deviation {worst:.1e}; blobs recovered {recovered}/20 seeds"),
    )
}

// ---------------------------------------------------------------- 7

struct Pipeline {
    vocab: Vocabulary,
    pairs: Vec<PositivePair>,
    validation: LabeledDataset,
    held_out: LabeledDataset,
    base: Transformer<f32>,
}

fn pipeline() -> Pipeline {
    let spec = |seed| SyntheticSpec::with_generated_pools(4, 60, 12, 12, 0.3, seed);
    let train = generate_synthetic(&spec(701)).unwrap();
    let validation = generate_synthetic(&spec(702)).unwrap();
    let held_out = generate_synthetic(&spec(703)).unwrap();
    let mut corpus: Vec<String> = train
        .texts()
        .iter()
        .chain(validation.texts())
        .chain(held_out.texts())
        .cloned()
        .collect();
    corpus.extend(builtin_templates().iter().map(|t| t.pattern.replace(prompts::PLACEHOLDER, " ")));
    let vocab = Vocabulary::build(&corpus, 512).unwrap();
    let translator = MockTranslator::default();
    let paraphraser = MockParaphraser::default();
    let clients = Clients {
        translator: Some(&translator),
        paraphraser: Some(&paraphraser),
    };
    let methods = [
        AugmentMethod::Deletion,
        AugmentMethod::Swap,
        AugmentMethod::CharNoise,
        AugmentMethod::BackTranslation,
        AugmentMethod::LlmParaphrase,
    ];
    let pairs = build_pair_corpus(train.texts(), &methods, &AugmentConfig::default(), clients, 704)
        .unwrap()
        .pairs;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 48,
        seed: 705,
    };
    Pipeline {
        vocab,
        pairs,
        validation,
        held_out,
        base: Transformer::init(&cfg).unwrap(),
    }
}

fn fine_tune(
    p: &Pipeline,
    kind: PoolingKind,
    max_steps: usize,
    eval_every: usize,
) -> Result<(AdaptedModel<f32>, TrainReport), String> {
    let ccw = prompts::lookup("CCW").unwrap();
    let mut model = AdaptedModel::attach(p.base.clone(), LoraSpec::default(), 706).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        max_steps,
        eval_every,
        seed: 707,
        pooling: PoolingStrategy::new(kind),
        template: Some("CCW".into()),
        ..TrainConfig::default()
    };
    let report = Trainer::new(&p.vocab, Some(&ccw), cfg)
        .with_validation(&p.validation)
        .train(&mut model, &p.pairs)
        .map_err(|e| e.to_string())?;
    Ok((model, report))
}

fn criterion_7a(p: &Pipeline) -> Result<(Outcome, AdaptedModel<f32>), String> {
    let start = Instant::now();
    let ccw = prompts::lookup("CCW").unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    let mut mean_model = None;
    for kind in [PoolingKind::Mean, PoolingKind::LastToken] {
        let (model, report) = fine_tune(p, kind, 300, 25)?;
        let baseline = report.evals[0].score;
        let best = report.best_score.unwrap_or(baseline);
        let pooling = PoolingStrategy::new(kind);
        let untrained = AdaptedModel::attach(p.base.clone(), LoraSpec::default(), 706).unwrap();
        let held_base = cluster_eval(&untrained, &p.vocab, &p.held_out, Some(&ccw), pooling, 0)
            .map_err(|e| e.to_string())?
            .v_measure;
        let held_best = cluster_eval(&model, &p.vocab, &p.held_out, Some(&ccw), pooling, 0)
            .map_err(|e| e.to_string())?
            .v_measure;
        ok &= best - baseline >= 0.10;
        details.push(format!(
            "{}: validation {baseline:.3} -> {best:.3} (best step {}), held-out {held_base:.3} -> {held_best:.3}",
            kind.name(),
            report.best_step
        ));
        if kind == PoolingKind::Mean {
            mean_model = Some(model);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed < 600.0;
    details.push(format!("{elapsed:.0}s"));
    Ok((check(ok, details.join("; ")), mean_model.unwrap()))
}

fn criterion_7b(p: &Pipeline) -> Outcome {
    let (_, report) = fine_tune(p, PoolingKind::Mean, 2500, 100)?;
    let best = report.best_score.unwrap();
    let last = report.evals.last().unwrap();
    let curve: Vec<String> = report
        .evals
        .iter()
        .step_by(5)
        .map(|e| format!("{}:{:.2}", e.step, e.score))
        .collect();
    check(
        report.best_step < 2500 && last.step == 2500 && last.score <= best,
        format!(
            "best step {} (score {best:.3}), final step {} score {:.3}; curve {}",
            report.best_step,
            last.step,
            last.score,
            curve.join(" ")
        ),
    )
}

fn criterion_7c(p: &Pipeline, model: &AdaptedModel<f32>) -> Outcome {
    let pooling = PoolingStrategy::new(PoolingKind::Mean);
    let probe = generate_synthetic(&SyntheticSpec::with_generated_pools(4, 250, 12, 12, 0.3, 706)).unwrap();
    let scores = |name: &str| -> Result<Vec<f64>, String> {
        let t = prompts::lookup(name).unwrap();
        (0..5)
            .map(|seed| {
                cluster_eval(model, &p.vocab, &probe, Some(&t), pooling, seed)
                    .map(|r| r.v_measure)
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var.sqrt())
    };
    let ccw = scores("CCW")?;
    let question = scores("Question")?;
    let (m1, s1) = stats(&ccw);
    let (m2, s2) = stats(&question);
    let noise = 2.0 * (s1 * s1 / 5.0 + s2 * s2 / 5.0).sqrt();
    let delta = (m1 - m2).abs();
    check(
        delta > 0.0 && delta > noise,
        format!("{} texts; CCW {m1:.4} ± {s1:.4}, Question {m2:.4} ± {s2:.4} over 5 seeds; |Δ| {delta:.4} vs noise {noise:.4}", probe.len()),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let run = |args: &[&str]| -> Result<(), String> {
        cli::run_args(std::iter::once("embedlab").chain(args.iter().copied()))
            .map(|_| ())
            .map_err(|f| format!("{:?} exited {}: {f}", args.first(), f.code))
    };
    let (train, val, vocab, pairs, out, eval, probe) = (
        p("train.jsonl"),
        p("val.jsonl"),
        p("vocab.txt"),
        p("pairs.jsonl"),
        p("run"),
        p("eval.json"),
        p("probe.csv"),
    );
    run(&["--seed", "81", "synth", "--samples-per-cluster", "20", "-o", &train])?;
    run(&["--seed", "82", "synth", "--samples-per-cluster", "20", "-o", &val])?;
    run(&["vocab", &train, &val, "--with-templates", "-o", &vocab])?;
    run(&[
        "--seed", "83", "augment", &train, "--methods", "deletion,swap,char_noise,back_translation,llm_paraphrase",
        "--mock-clients", "-o", &pairs,
    ])?;
    run(&[
        "--seed", "84", "--jobs", "4", "train", &pairs, "--vocab", &vocab, "--validation", &val, "--out-dir", &out,
        "--steps", "20", "--batch-size", "16", "--eval-every", "10", "--checkpoint-every", "10", "--lr", "1e-3",
        "--template", "CCW", "--d-model", "16", "--heads", "2",
    ])?;
    let base = p("run/base.model.ckpt");
    let best = p("run/best.adapter.ckpt");
    run(&[
        "eval", &val, "--base", &base, "--vocab", &vocab, "--compare", "base", &best, "--templates", "CCW,Question",
        "--poolings", "mean,last", "-o", &eval,
    ])?;
    run(&[
        "attn", "a man is driving a car", "--base", &base, "--adapter", &best, "--vocab", &vocab, "--template", "CCW",
        "--per-head", "-o", &probe,
    ])?;

    let manifests = [
        format!("{train}.manifest.json"),
        format!("{val}.manifest.json"),
        format!("{vocab}.manifest.json"),
        format!("{pairs}.manifest.json"),
        format!("{out}/manifest.json"),
        format!("{eval}.manifest.json"),
        format!("{probe}.manifest.json"),
    ];
    let mut checked = 0;
    let mut problems = Vec::new();
    for m in &manifests {
        let path = Path::new(m);
        let manifest = RunManifest::load(path).map_err(|e| e.to_string())?;
        let report = cli::replay(path).map_err(|f| f.to_string())?;
        checked += report.checked;
        problems.extend(report.mismatched.iter().map(|p| format!("{} changed", p.display())));
        for input in &manifest.inputs {
            if FileDigest::of(&input.path).ok().as_ref() != Some(input) {
                problems.push(format!("input {} mutated", input.path.display()));
            }
        }
    }
    check(
        problems.is_empty() && checked >= 12,
        format!(
            "{} commands replayed, {checked} outputs compared byte for byte{}",
            manifests.len(),
            if problems.is_empty() { String::new() } else { format!(": {problems:?}") }
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let expected = [
        ("EOL", r#"This sentence: "[X]" means in one word:"#),
        ("PCoT", r#"After thinking step by step, this sentence: "[X]" means in one word:"#),
        ("SUM", r#"This sentence: "[X]" can be summarized as:"#),
        ("CCW", r#"This sentence: "[X]" belongs to the following cluster:"#),
        ("CCP", r#"Cluster the text: "[X]"."#),
        ("Question", r#"Which cluster would you assign the sentence: "[X]" to?"#),
        ("CLS", r#"This sentence: "[X]" can be classified as:"#),
    ];
    let got = builtin_templates();
    let mut mismatches = Vec::new();
    if got.len() != expected.len() {
        mismatches.push(format!("{} templates", got.len()));
    }
    for (name, pattern) in expected {
        match got.iter().find(|t| t.name == name) {
            Some(t) if t.pattern == pattern => {}
            Some(t) => mismatches.push(format!("{name}: {:?}", t.pattern)),
            None => mismatches.push(format!("{name} missing")),
        }
    }
    let ccw = prompts::lookup("CCW").unwrap().apply("a man is driving a car").unwrap();
    let applied = ccw.text == r#"This sentence: "a man is driving a car" belongs to the following cluster:"#
        && &ccw.text[ccw.content_span.clone()] == "a man is driving a car";
    check(
        mismatches.is_empty() && applied,
        format!("7 templates character-exact: {}; CCW application exact: {applied}", mismatches.is_empty())
            + &if mismatches.is_empty() { String::new() } else { format!(" {mismatches:?}") },
    )
}

// ----------------------------------------------------------------

fn run_criterion(id: &str, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("[{tag}] criterion {id} {title} ({secs:.1}s): {detail}");
    ok
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| id.starts_with(f.as_str()));
    let mut results: Vec<bool> = Vec::new();
    let mut run = |id: &str, title: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(id) {
            results.push(run_criterion(id, title, f));
        }
    };
    run("1", "gradient suite", &mut criterion_1);
    run("2", "LoRA identities", &mut criterion_2);
    run("3", "loss closed forms", &mut criterion_3);
    run("4", "pooling/attention structure", &mut criterion_4);
    run("5", "augmentation statistics", &mut criterion_5);
    run("6", "metric oracles", &mut criterion_6);
    if ["7a", "7b", "7c"].iter().any(|id| wanted(id)) {
        let p = pipeline();
        let mut trained = None;
        run("7a", "fine-tuning helps", &mut || {
            let (outcome, model) = criterion_7a(&p)?;
            trained = Some(model);
            outcome
        });
        run("7b", "early peaking", &mut || criterion_7b(&p));
        run("7c", "prompt-template sensitivity", &mut || match &trained {
            Some(m) => criterion_7c(&p, m),
            None => {
                let (m, _) = fine_tune(&p, PoolingKind::Mean, 300, 25)?;
                criterion_7c(&p, &m)
            }
        });
    }
    run("8", "manifest replay determinism", &mut criterion_8);
    run("9", "exact prompt strings", &mut criterion_9);

    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
