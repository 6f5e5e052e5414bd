use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_task, DataError, TaskDataset, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub kind: TaskKind,
}

/// A task stream: tasks are learned in listing order.
///
/// ```toml
/// [[task]]
/// name = "banking"
/// path = "banking.jsonl"
/// kind = "intent"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    #[serde(rename = "task")]
    pub tasks: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl StreamManifest {
    pub fn new(tasks: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            tasks,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let err = |msg: String| DataError::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m: StreamManifest = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.tasks.is_empty() {
            return Err(err("no tasks listed".into()));
        }
        let mut names: Vec<&str> = m.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(err("duplicate task name".into()));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = toml::to_string(self).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    /// Loads every listed task, in listing order.
    pub fn load_datasets(&self) -> Result<Vec<TaskDataset>, DataError> {
        self.tasks
            .iter()
            .map(|e| {
                let mut ds = load_task(&self.resolve(e), e.kind)?;
                ds.name = e.name.clone();
                Ok(ds)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let m = StreamManifest::new(
            vec![
                ManifestEntry {
                    name: "a".into(),
                    path: "a.jsonl".into(),
                    kind: TaskKind::Intent,
                },
                ManifestEntry {
                    name: "b".into(),
                    path: "b.jsonl".into(),
                    kind: TaskKind::Slot,
                },
            ],
            dir.path(),
        );
        let p = dir.path().join("stream.toml");
        m.save(&p).unwrap();
        let back = StreamManifest::load(&p).unwrap();
        assert_eq!(back.tasks, m.tasks);
        assert_eq!(back.resolve(&back.tasks[1]), dir.path().join("b.jsonl"));
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        fs::write(&p, "task = []\n").unwrap();
        assert!(StreamManifest::load(&p).is_err());
    }
}
