//! Self-describing JSON checkpoints: configs, vocabulary, task prompts and
//! named tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::model::{Model, ModelConfig, ModelError};
use crate::prompting::TaskSpec;
use crate::replay::EngineConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub engine: EngineConfig,
    pub vocab: Vocab,
    /// Prompts of every task in the stream, in training order.
    pub tasks: Vec<TaskSpec>,
    /// Number of tasks learned when this was written.
    pub tasks_learned: usize,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture<S: Scalar>(
        model: &Model<S>,
        engine: &EngineConfig,
        vocab: &Vocab,
        tasks: &[TaskSpec],
        tasks_learned: usize,
    ) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            model_config: *model.config(),
            engine: engine.clone(),
            vocab: vocab.clone(),
            tasks: tasks.to_vec(),
            tasks_learned,
            tensors,
        }
    }

    /// Rebuilds the model, checking every tensor against the stored config.
    pub fn model<S: Scalar>(&self) -> Result<Model<S>> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        if self.model_config.vocab_size != self.vocab.len() {
            return Err(CheckpointError::Mismatch(format!(
                "vocab_size {} but {} vocabulary entries",
                self.model_config.vocab_size,
                self.vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        for t in &self.tensors {
            let data = t.data.iter().map(|&v| S::lit(v)).collect();
            let tensor =
                Tensor::new(t.shape.clone(), data).map_err(|e| CheckpointError::Mismatch(format!("{}: {e}", t.name)))?;
            if store.id(&t.name).is_some() {
                return Err(CheckpointError::Mismatch(format!("duplicate tensor {}", t.name)));
            }
            store.insert(t.name.clone(), tensor);
        }
        Ok(Model::from_params(self.model_config, store)?)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| CheckpointError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Self = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ck.format_version));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    fn small() -> (Model<f32>, Vocab) {
        let vocab = Vocab::from_words(["a", "b", "c", "d"]);
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            context_len: 16,
            vocab_size: vocab.len(),
            z_dim: 2,
            latent_hidden: 4,
            ..Default::default()
        };
        (Model::new(cfg, 3).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, vocab) = small();
        let specs = vec![TaskSpec::new("a", TaskKind::Intent)];
        let ck = Checkpoint::capture(&m, &EngineConfig::default(), &vocab, &specs, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let m2: Model<f32> = back.model().unwrap();
        assert_eq!(m2, m);
        assert_eq!(m2.fingerprint(), m.fingerprint());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let (m, vocab) = small();
        let mut ck = Checkpoint::capture(&m, &EngineConfig::default(), &vocab, &[], 0);
        ck.model_config.d_ff = 32;
        assert!(matches!(ck.model::<f32>(), Err(CheckpointError::Model(_))));
        let mut ck2 = Checkpoint::capture(&m, &EngineConfig::default(), &vocab, &[], 0);
        ck2.tensors.pop();
        assert!(ck2.model::<f32>().is_err());
        let mut ck3 = Checkpoint::capture(&m, &EngineConfig::default(), &vocab, &[], 0);
        ck3.format_version = 99;
        assert!(matches!(ck3.model::<f32>(), Err(CheckpointError::Version(99))));
    }
}
