//! Samples, task datasets, vocabulary, loaders and the synthetic task stream.

mod loader;
mod manifest;
mod synthetic;
mod vocab;

pub use loader::{load_task, parse_task_lines, write_task};
pub use manifest::{ManifestEntry, StreamManifest};
pub use synthetic::{gen_synthetic_stream, SyntheticConfig};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, RESERVED, UNK};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: empty {split} split")]
    EmptySplit { path: PathBuf, split: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Intent,
    Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Real,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotPair {
    pub slot: String,
    pub value: String,
}

impl SlotPair {
    pub fn new(slot: &str, value: &str) -> Self {
        Self {
            slot: normalize_text(slot),
            value: normalize_text(value),
        }
    }
}

/// Structured output `y` of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    Intent(String),
    Slots(Vec<SlotPair>),
}

impl Output {
    pub fn kind(&self) -> TaskKind {
        match self {
            Output::Intent(_) => TaskKind::Intent,
            Output::Slots(_) => TaskKind::Slot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    /// Lowercased whitespace tokens, never empty.
    pub utterance: Vec<String>,
    pub output: Output,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(utterance: &str, output: Output) -> Self {
        Self {
            utterance: tokenize(utterance),
            output,
            provenance: Provenance::Real,
        }
    }

    pub fn utterance_text(&self) -> String {
        self.utterance.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    /// `N_t`, the training set size.
    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Lowercase and collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    tokenize(text).join(" ")
}
