use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_text, tokenize, DataError, Output, Sample, SlotPair, TaskDataset, TaskKind};

#[derive(Debug, Serialize, Deserialize)]
struct SlotRecord {
    slot: String,
    value: String,
}

/// One line of a task file.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slots: Option<Vec<SlotRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

/// Loads a line-delimited JSON task file. Each record carries `utterance`
/// plus `intent` or `slots`, and an optional `split` (`train` by default).
/// The dataset is named after the file stem.
pub fn load_task(path: &Path, kind: TaskKind) -> Result<TaskDataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_task_lines(&text, path, &name, kind)
}

pub fn parse_task_lines(text: &str, path: &Path, name: &str, kind: TaskKind) -> Result<TaskDataset, DataError> {
    let malformed = |line: usize, msg: String| DataError::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut ds = TaskDataset {
        name: name.to_string(),
        kind,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| malformed(lineno, e.to_string()))?;
        let utterance = tokenize(&rec.utterance);
        if utterance.is_empty() {
            return Err(malformed(lineno, "empty utterance".into()));
        }
        let output = match kind {
            TaskKind::Intent => {
                let label = rec
                    .intent
                    .map(|l| normalize_text(&l))
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| malformed(lineno, "missing intent".into()))?;
                Output::Intent(label)
            }
            TaskKind::Slot => {
                let slots = rec.slots.ok_or_else(|| malformed(lineno, "missing slots".into()))?;
                let mut pairs = Vec::with_capacity(slots.len());
                for s in slots {
                    let pair = SlotPair::new(&s.slot, &s.value);
                    if pair.slot.is_empty() || pair.value.is_empty() {
                        return Err(malformed(lineno, "empty slot name or value".into()));
                    }
                    pairs.push(pair);
                }
                Output::Slots(pairs)
            }
        };
        let sample = Sample {
            utterance,
            output,
            provenance: Default::default(),
        };
        match rec.split.as_deref().unwrap_or("train") {
            "train" => ds.train.push(sample),
            "valid" | "dev" => ds.valid.push(sample),
            "test" => ds.test.push(sample),
            other => return Err(malformed(lineno, format!("unknown split {other:?}"))),
        }
    }
    if ds.train.is_empty() {
        return Err(DataError::EmptySplit {
            path: path.to_path_buf(),
            split: "train",
        });
    }
    if ds.test.is_empty() {
        return Err(DataError::EmptySplit {
            path: path.to_path_buf(),
            split: "test",
        });
    }
    Ok(ds)
}

/// Writes a dataset in the format read by [`load_task`].
pub fn write_task(path: &Path, ds: &TaskDataset) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for (split, samples) in [("train", &ds.train), ("valid", &ds.valid), ("test", &ds.test)] {
        for s in samples {
            let (intent, slots) = match &s.output {
                Output::Intent(l) => (Some(l.clone()), None),
                Output::Slots(p) => (
                    None,
                    Some(
                        p.iter()
                            .map(|p| SlotRecord {
                                slot: p.slot.clone(),
                                value: p.value.clone(),
                            })
                            .collect(),
                    ),
                ),
            };
            let rec = Record {
                utterance: s.utterance_text(),
                intent,
                slots,
                split: Some(split.to_string()),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").map_err(io_err)?;
        }
    }
    f.flush().map_err(io_err)
}
