//! Training objectives: the two-term LM loss, the β-weighted ELBO with its
//! cyclic schedule, token-level distillation losses, and the α-mixed replay
//! loss. Every function returns a quantity to minimize.

use serde::{Deserialize, Serialize};

use crate::prompting::RenderedPrompt;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty {0} span")]
    EmptySpan(&'static str),
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("invalid loss config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the `y | g_t(x)` term of the LM loss.
    pub lambda: f64,
    /// Distillation mixing weight for pseudo samples.
    pub alpha: f64,
    pub beta_cycles_per_epoch: usize,
    /// Fraction of each annealing cycle spent ramping β from 0 to 1.
    pub beta_ramp_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            alpha: 0.5,
            beta_cycles_per_epoch: 4,
            beta_ramp_fraction: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(LossError::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::Alpha(self.alpha));
        }
        if self.beta_cycles_per_epoch == 0 {
            return Err(LossError::Config("beta_cycles_per_epoch must be >= 1".into()));
        }
        if !(self.beta_ramp_fraction > 0.0 && self.beta_ramp_fraction <= 1.0) {
            return Err(LossError::Config("beta_ramp_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> BetaSchedule {
        BetaSchedule {
            steps_per_epoch,
            cycles: self.beta_cycles_per_epoch,
            ramp_fraction: self.beta_ramp_fraction,
        }
    }
}

/// Cyclic KL-weight annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub steps_per_epoch: usize,
    pub cycles: usize,
    pub ramp_fraction: f64,
}

impl BetaSchedule {
    /// Length of one cycle in steps, `steps_per_epoch / cycles`.
    pub fn period(&self) -> f64 {
        (self.steps_per_epoch as f64 / self.cycles.max(1) as f64).max(1.0)
    }

    /// Last step of the linear ramp within a cycle.
    pub fn ramp_end(&self) -> f64 {
        self.ramp_fraction * self.period()
    }
}

/// KL weight at global `step`: linear from 0 to 1 over the first
/// `ramp_fraction` of each cycle, then held at 1.
pub fn beta_at(step: usize, schedule: &BetaSchedule) -> f64 {
    let period = schedule.period();
    let pos = (step as f64) % period;
    (pos / schedule.ramp_end()).min(1.0)
}

/// Logit rows and target ids predicting tokens `start..end` of the
/// sequence (row `i` predicts token `i + 1`).
pub fn next_token_targets(ids: &[usize], start: usize, end: usize) -> (Vec<usize>, Vec<usize>) {
    let rows = (start.max(1) - 1..end - 1).collect();
    let targets = ids[start.max(1)..end].to_vec();
    (rows, targets)
}

/// Whole sequence after `[BOS]`, including the closing `[EOS]`.
pub fn full_targets(p: &RenderedPrompt) -> (Vec<usize>, Vec<usize>) {
    next_token_targets(&p.ids, 1, p.ids.len())
}

/// `y` and its closing `[EOS]`.
pub fn output_targets(p: &RenderedPrompt) -> Result<(Vec<usize>, Vec<usize>)> {
    match &p.y {
        Some(y) if !y.is_empty() => Ok(next_token_targets(&p.ids, y.start, (y.end + 1).min(p.ids.len()))),
        _ => Err(LossError::EmptySpan("y")),
    }
}

/// `x` plus the first postfix token, which ends an utterance when decoding.
pub fn input_targets(p: &RenderedPrompt) -> Result<(Vec<usize>, Vec<usize>)> {
    if p.x.is_empty() {
        return Err(LossError::EmptySpan("x"));
    }
    let end = (p.x.end + 1).min(p.ids.len());
    Ok(next_token_targets(&p.ids, p.x.start, end))
}

/// `NLL_full + λ · NLL_y`, both per-token means.
pub fn lm_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, prompt: &RenderedPrompt, lambda: f64) -> Result<Var> {
    let (yr, yt) = output_targets(prompt)?;
    let (fr, ft) = full_targets(prompt);
    let full = g.nll(logits, &fr, &ft)?;
    let y = g.nll(logits, &yr, &yt)?;
    let weighted = g.scale(y, S::lit(lambda));
    Ok(g.add(full, weighted)?)
}

/// Mean token NLL of the `x` span under a decoder forward.
pub fn reconstruction_nll<S: Scalar>(g: &mut Graph<S>, logits: Var, prompt: &RenderedPrompt) -> Result<Var> {
    let (rows, targets) = input_targets(prompt)?;
    Ok(g.nll(logits, &rows, &targets)?)
}

/// `NLL_x + β · KL`.
pub fn cvae_elbo_loss<S: Scalar>(g: &mut Graph<S>, recon_nll: Var, kl: Var, beta: f64) -> Result<Var> {
    let weighted = g.scale(kl, S::lit(beta));
    Ok(g.add(recon_nll, weighted)?)
}

/// Row-wise softmax of a `rows × vocab` logit buffer.
pub fn softmax_rows<S: Scalar>(logits: &[S], vocab: usize) -> Vec<S> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(vocab) {
        crate::tensor::softmax_in_place(row);
    }
    out
}

fn gather_rows<S: Scalar>(probs: &[S], vocab: usize, rows: &[usize]) -> Vec<S> {
    rows.iter()
        .flat_map(|&r| probs[r * vocab..(r + 1) * vocab].iter().copied())
        .collect()
}

fn check_teacher<S: Scalar>(g: &Graph<S>, student: Var, teacher: &[S]) -> Result<usize> {
    let (r, v) = g.dims(student);
    if teacher.len() != r * v {
        return Err(TensorError::ShapeMismatch {
            op: "kd",
            lhs: vec![r, v],
            rhs: vec![teacher.len() / v.max(1), v],
        }
        .into());
    }
    Ok(v)
}

/// Token-level distillation over the full sequence plus the `y` span.
/// `teacher_probs` holds the teacher's next-token distribution for every
/// position of the same sequence.
pub fn kd_lm_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_probs: &[S],
    prompt: &RenderedPrompt,
) -> Result<Var> {
    let v = check_teacher(g, student_logits, teacher_probs)?;
    let (fr, _) = full_targets(prompt);
    let (yr, _) = output_targets(prompt)?;
    let full = g.soft_cross_entropy(student_logits, &fr, &gather_rows(teacher_probs, v, &fr))?;
    let y = g.soft_cross_entropy(student_logits, &yr, &gather_rows(teacher_probs, v, &yr))?;
    Ok(g.add(full, y)?)
}

/// Distilled reconstruction of the `x` span. Teacher and student decoders
/// must have seen the same `z`.
pub fn kd_rec_loss<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_probs: &[S],
    prompt: &RenderedPrompt,
) -> Result<Var> {
    let v = check_teacher(g, student_logits, teacher_probs)?;
    let (rows, _) = input_targets(prompt)?;
    Ok(g.soft_cross_entropy(student_logits, &rows, &gather_rows(teacher_probs, v, &rows))?)
}

/// `α · kd + (1 − α) · plain` for pseudo samples.
pub fn replay_loss<S: Scalar>(g: &mut Graph<S>, plain: Var, kd: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::Alpha(alpha));
    }
    let a = g.scale(kd, S::lit(alpha));
    let b = g.scale(plain, S::lit(1.0 - alpha));
    Ok(g.add(a, b)?)
}
