use rand::Rng;

use super::Result;
use crate::data::{Vocab, EOS};
use crate::model::{Injection, Model};
use crate::prompting::Reject;
use crate::tensor::{softmax_in_place, Graph};
use crate::Scalar;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Samples from the softmax restricted to the `k` highest logits. Returns the
/// token and its rank (0 = most likely) in the full distribution.
pub fn top_k_sample<S: Scalar, R: Rng>(row: &[S], k: usize, rng: &mut R) -> (usize, usize) {
    assert!(!row.is_empty() && k >= 1, "top-k needs a non-empty row and k >= 1");
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps lower ids first among equal logits.
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k.min(row.len()));
    if order.len() == 1 {
        return (order[0], 0);
    }
    let mut probs: Vec<S> = order.iter().map(|&i| row[i]).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (rank, (&tok, p)) in order.iter().zip(&probs).enumerate() {
        acc += p.as_f64();
        if u < acc {
            return (tok, rank);
        }
    }
    let last = order.len() - 1;
    (order[last], last)
}

/// One sampled pseudo input.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Sampled input tokens, without the prompt or the stop token.
    pub x: Vec<usize>,
    /// Rank of every emitted token (the stop token included) in its step's
    /// distribution.
    pub ranks: Vec<usize>,
    pub reject: Option<Reject>,
}

fn last_row<S: Scalar>(g: &Graph<S>, logits: crate::tensor::Var) -> &[S] {
    let (rows, cols) = g.dims(logits);
    &g.value(logits)[(rows - 1) * cols..]
}

/// Decodes from `head` with top-k sampling until `stop` is emitted.
pub(crate) fn sample_input<S: Scalar, R: Rng>(
    model: &Model<S>,
    head: &[usize],
    stop: usize,
    z: Option<&[S]>,
    top_k: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Generation> {
    let context = model.config().context_len;
    let mut seq = head.to_vec();
    let mut gen = Generation {
        x: Vec::new(),
        ranks: Vec::new(),
        reject: None,
    };
    loop {
        if gen.x.len() >= max_len || seq.len() >= context {
            gen.reject = Some(Reject::TooLong);
            return Ok(gen);
        }
        let mut g = Graph::new();
        let inject = z.map(|z| Injection {
            z: g.row_leaf(z.to_vec()),
            rows: model.injection_rows(head.len(), seq.len()),
        });
        let out = model.lm_forward(&mut g, &seq, inject.as_ref())?;
        let (tok, rank) = top_k_sample(last_row(&g, out.logits), top_k, rng);
        gen.ranks.push(rank);
        if tok == stop {
            if gen.x.is_empty() {
                gen.reject = Some(Reject::EmptyInput);
            }
            return Ok(gen);
        }
        if tok == EOS {
            gen.reject = Some(Reject::MissingPostfix);
            return Ok(gen);
        }
        if Vocab::is_reserved(tok) {
            gen.reject = Some(Reject::ReservedToken);
            return Ok(gen);
        }
        gen.x.push(tok);
        seq.push(tok);
    }
}

/// Greedily extends `seq` until `[EOS]` (kept), `max_new` tokens, or the
/// context limit.
pub(crate) fn greedy_extend<S: Scalar>(model: &Model<S>, mut seq: Vec<usize>, max_new: usize) -> Result<Vec<usize>> {
    let context = model.config().context_len;
    for _ in 0..max_new {
        if seq.len() >= context {
            break;
        }
        let mut g = Graph::new();
        let out = model.lm_forward(&mut g, &seq, None)?;
        let tok = argmax(last_row(&g, out.logits));
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(seq)
}
