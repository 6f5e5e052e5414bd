//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use std::collections::{BTreeMap, BTreeSet};

use pcll::data::{Output, Sample, SlotPair, SyntheticConfig, TaskDataset, TaskKind, Vocab};
use pcll::losses::{kd_lm_loss, lm_loss};
use pcll::model::{GaussianDiag, ModelConfig};
use pcll::prompting::{render, TaskSpec};
use pcll::replay::stream_vocab;
use pcll::tensor::Graph;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Mean of the last row, summed left to right.
pub fn brute_score(rows: &[Vec<f64>]) -> f64 {
    let last = &rows[rows.len() - 1];
    let mut total = 0.0;
    for v in last {
        total += v;
    }
    total / last.len() as f64
}

/// Mean over task completions of the mean over all tasks.
pub fn brute_lca(rows: &[Vec<f64>]) -> f64 {
    let mut area = 0.0;
    for row in rows {
        let mut z = 0.0;
        for v in row {
            z += v;
        }
        area += z / row.len() as f64;
    }
    area / rows.len() as f64
}

/// Distinct n-grams over total n-grams, keyed on the joined text.
pub fn brute_dist(corpus: &[Vec<String>], n: usize) -> f64 {
    let mut seen = BTreeSet::new();
    let mut total = 0usize;
    for u in corpus {
        let mut i = 0;
        while i + n <= u.len() {
            seen.insert(u[i..i + n].join("\u{1}"));
            total += 1;
            i += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Per-type F1 from multiset intersections, macro-averaged over gold types in
/// sorted order.
pub fn brute_macro_f1<'a>(pred: &'a [Vec<SlotPair>], gold: &'a [Vec<SlotPair>]) -> f64 {
    let types: BTreeSet<String> = gold.iter().flatten().map(|p| p.slot.clone()).collect();
    if types.is_empty() {
        return if pred.iter().all(Vec::is_empty) { 100.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for t in &types {
        let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
        for (p, g) in pred.iter().zip(gold) {
            let count = |set: &'a [SlotPair]| {
                let mut m: BTreeMap<&'a str, usize> = BTreeMap::new();
                for pair in set.iter().filter(|x| &x.slot == t) {
                    *m.entry(pair.value.as_str()).or_default() += 1;
                }
                m
            };
            let (cp, cg) = (count(p), count(g));
            n_pred += cp.values().sum::<usize>();
            n_gold += cg.values().sum::<usize>();
            for (v, a) in &cp {
                tp += (*a).min(cg.get(v).copied().unwrap_or(0));
            }
        }
        let (fp, fn_) = (n_pred - tp, n_gold - tp);
        let denom = 2 * tp + fp + fn_;
        total += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    100.0 * total / types.len() as f64
}

pub fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let t = rng.random_range(1..6);
    (0..t)
        .map(|_| (0..t).map(|_| (rng.random_range(0..=1000) as f64) / 10.0).collect())
        .collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let words = ["a", "b", "c", "d", "e"];
    (0..rng.random_range(1..8))
        .map(|_| {
            (0..rng.random_range(0..7))
                .map(|_| words.choose(rng).unwrap().to_string())
                .collect()
        })
        .collect()
}

pub fn random_slot_sets(rng: &mut ChaCha8Rng) -> (Vec<Vec<SlotPair>>, Vec<Vec<SlotPair>>) {
    let slots = ["city", "date", "food"];
    let values = ["x", "y", "z"];
    let draw = |rng: &mut ChaCha8Rng| -> Vec<SlotPair> {
        (0..rng.random_range(0..4))
            .map(|_| SlotPair::new(slots.choose(rng).unwrap(), values.choose(rng).unwrap()))
            .collect()
    };
    let n = rng.random_range(1..7);
    let gold: Vec<_> = (0..n).map(|_| draw(rng)).collect();
    let pred: Vec<_> = (0..n).map(|_| draw(rng)).collect();
    (pred, gold)
}

/// Log density of a diagonal Gaussian, written out independently of the
/// crate's helper.
fn log_normal(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((z, m), lv)| -0.5 * (ln2pi + lv + (z - m).powi(2) / lv.exp()))
        .sum()
}

/// Monte Carlo `E_q[log q − log p]` with antithetic pairs, `n` draws total.
pub fn mc_kl(q: &GaussianDiag<f64>, p: &GaussianDiag<f64>, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..n / 2 {
        let eps: Vec<f64> = (0..q.dim()).map(|_| StandardNormal.sample(rng)).collect();
        for sign in [1.0, -1.0] {
            let z: Vec<f64> = q
                .mu
                .iter()
                .zip(&q.logvar)
                .zip(&eps)
                .map(|((m, lv), e)| m + sign * (0.5 * lv).exp() * e)
                .collect();
            total += log_normal(&z, &q.mu, &q.logvar) - log_normal(&z, &p.mu, &p.logvar);
        }
    }
    total / (2 * (n / 2)) as f64
}

/// Moderate parameters keep the Monte Carlo standard error near 2e-3.
pub fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> GaussianDiag<f64> {
    GaussianDiag {
        mu: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
        logvar: (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
    }
}

/// `|kd_lm_loss(one-hot teacher) − lm_loss(λ = 1)|` on a random sample with
/// random student logits.
pub fn kd_onehot_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = TaskSpec::new("demo", TaskKind::Intent);
    let words = ["book", "a", "flight", "play", "some", "jazz", "now"];
    let labels = ["travel", "music", "alarm"];
    let mut vocab_words: Vec<String> = spec.template_words();
    vocab_words.extend(words.iter().chain(&labels).map(|s| s.to_string()));
    let vocab = Vocab::from_words(vocab_words.iter().map(String::as_str));
    let x: Vec<String> = (0..rng.random_range(1..6))
        .map(|_| words.choose(&mut rng).unwrap().to_string())
        .collect();
    let y = Output::Intent(labels.choose(&mut rng).unwrap().to_string());
    let prompt = render(&vocab, &spec, &x, Some(&y), 64).unwrap();
    let (len, v) = (prompt.ids.len(), vocab.len());

    let mut g = Graph::<f64>::new();
    let logits = g
        .leaf(len, v, (0..len * v).map(|_| rng.random_range(-3.0..3.0)).collect())
        .unwrap();
    let mut teacher = vec![0.0; len * v];
    for i in 0..len {
        let next = prompt.ids.get(i + 1).copied().unwrap_or(0);
        teacher[i * v + next] = 1.0;
    }
    let kd = kd_lm_loss(&mut g, logits, &teacher, &prompt).unwrap();
    let lm = lm_loss(&mut g, logits, &prompt, 1.0).unwrap();
    (g.scalar_value(kd) - g.scalar_value(lm)).abs()
}

/// A small model that still learns the synthetic tasks quickly.
pub fn small_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 32,
        z_dim: 4,
        latent_hidden: 8,
        vocab_size: vocab.len(),
        ..Default::default()
    }
}

/// Three short synthetic tasks and their shared vocabulary.
pub fn small_stream(seed: u64, n_per_task: usize) -> (Vec<TaskDataset>, Vocab) {
    let tasks = SyntheticConfig {
        seed,
        n_per_task,
        ..Default::default()
    }
    .generate();
    let vocab = stream_vocab(&tasks);
    (tasks, vocab)
}

pub fn intent(sample: &Sample) -> &str {
    match &sample.output {
        Output::Intent(l) => l,
        Output::Slots(_) => panic!("intent sample expected"),
    }
}
