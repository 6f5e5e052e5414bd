//! The lifelong-learning loop: per-task training, teacher snapshots,
//! pseudo-sample generation and replay mixing, plus baseline strategies.

mod decode;
mod learner;
mod stream;

pub use decode::{argmax, top_k_sample, Generation};
pub use learner::{task_specs, Counters, Learner, MixReport, PseudoRecord, StepLog, TaskReplayStats, TrainItem};
pub use stream::{run_stream, stream_vocab, StreamOutcome, TaskObserver};

use serde::{Deserialize, Serialize};

use crate::losses::{LossConfig, LossError};
use crate::model::{Model, ModelError};
use crate::prompting::PromptError;
use crate::tensor::{AdamConfig, TensorError};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("invalid replay config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at task {task}, epoch {epoch}, step {step}")]
    Diverged {
        task: usize,
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("task index {0} is out of range")]
    UnknownTask(usize),
    #[error("teacher snapshot was modified")]
    TeacherMutated,
    #[error("observer: {0}")]
    Observer(String),
}

pub type Result<T> = std::result::Result<T, ReplayError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Prompt-conditioned CVAE replay with teacher distillation.
    #[default]
    Pcll,
    /// Sequential fine-tuning with no replay.
    Finetune,
    /// LM-only replay generated from one special token per task.
    LamolToken,
    /// Replays a small memory of stored real samples.
    Er,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Pcll => "pcll",
            Strategy::Finetune => "finetune",
            Strategy::LamolToken => "lamol_token",
            Strategy::Er => "er",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pcll" => Ok(Strategy::Pcll),
            "finetune" => Ok(Strategy::Finetune),
            "lamol_token" => Ok(Strategy::LamolToken),
            "er" => Ok(Strategy::Er),
            other => Err(format!("unknown strategy `{other}` (pcll|finetune|lamol_token|er)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// Pseudo samples per new task as a fraction of its training size.
    pub gamma: f64,
    pub strategy: Strategy,
    pub top_k: usize,
    /// Cap on generated input tokens.
    pub max_decode_len: usize,
    /// Cap on greedily decoded output tokens.
    pub max_label_len: usize,
    pub er_fraction: f64,
    pub no_latent: bool,
    pub no_task_id: bool,
    pub no_kd: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Attempts per requested pseudo sample before giving up.
    pub resample_factor: usize,
    pub grad_clip: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            strategy: Strategy::Pcll,
            top_k: 20,
            max_decode_len: 96,
            max_label_len: 32,
            er_fraction: 0.01,
            no_latent: false,
            no_task_id: false,
            no_kd: false,
            epochs: 12,
            batch_size: 8,
            seed: 0,
            resample_factor: 5,
            grad_clip: 1.0,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ReplayError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(self.er_fraction > 0.0 && self.er_fraction < 1.0) {
            return bad("er_fraction must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_decode_len == 0 || self.max_label_len == 0 {
            return bad("decode lengths must be positive");
        }
        if self.resample_factor == 0 {
            return bad("resample_factor must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// Whether training uses the CVAE terms and decoding uses a latent.
    pub fn uses_latent(&self) -> bool {
        self.strategy == Strategy::Pcll && !self.no_latent
    }

    /// Whether pseudo samples are distilled from a teacher.
    pub fn uses_kd(&self) -> bool {
        self.strategy == Strategy::Pcll && !self.no_kd
    }

    pub fn generates(&self) -> bool {
        matches!(self.strategy, Strategy::Pcll | Strategy::LamolToken)
    }
}

/// Everything a [`Learner`] needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EngineConfig {
    pub replay: ReplayConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.replay.validate()?;
        self.loss.validate()?;
        if !(self.adam.lr > 0.0) {
            return Err(ReplayError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen copy of the model taken before a task's first gradient step.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot<S> {
    model: Model<S>,
    fingerprint: String,
}

pub fn snapshot_teacher<S: Scalar>(model: &Model<S>) -> TeacherSnapshot<S> {
    TeacherSnapshot {
        model: model.clone(),
        fingerprint: model.fingerprint(),
    }
}

impl<S: Scalar> TeacherSnapshot<S> {
    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recomputes the hash and compares it to the one taken at capture.
    pub fn verify(&self) -> Result<()> {
        if self.model.fingerprint() == self.fingerprint {
            Ok(())
        } else {
            Err(ReplayError::TeacherMutated)
        }
    }
}
