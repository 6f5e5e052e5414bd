//! Task scores, lifelong-learning summaries (Score, LCA) and Dist-n.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_text, SlotPair};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("score matrix row {0} is not filled")]
    Incomplete(usize),
    #[error("score {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed score matrix: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Percentage of exact matches after lowercasing and whitespace normalization.
pub fn intent_accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64> {
    if golds.is_empty() {
        return Err(MetricError::Empty("evaluation set"));
    }
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            what: "predictions vs golds",
            left: predictions.len(),
            right: golds.len(),
        });
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_text(p.as_ref()) == normalize_text(g.as_ref()))
        .count();
    Ok(100.0 * correct as f64 / golds.len() as f64)
}

#[derive(Debug, Default, Clone, Copy)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Macro-averaged F1 (percent) over slot types present in the golds.
/// Pairs match exactly on `(slot, value)`; counts are pooled over the set.
/// With no gold slots at all, returns 100 when nothing is predicted and 0
/// otherwise.
pub fn slot_macro_f1(predictions: &[Vec<SlotPair>], golds: &[Vec<SlotPair>]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            what: "predictions vs golds",
            left: predictions.len(),
            right: golds.len(),
        });
    }
    let mut per_type: BTreeMap<&str, Confusion> = BTreeMap::new();
    let mut gold_types: BTreeSet<&str> = BTreeSet::new();
    let mut any_pred = false;
    for (pred, gold) in predictions.iter().zip(golds) {
        let mut remaining: HashMap<(&str, &str), usize> = HashMap::new();
        for g in gold {
            gold_types.insert(&g.slot);
            *remaining.entry((&g.slot, &g.value)).or_default() += 1;
        }
        for p in pred {
            any_pred = true;
            let c = per_type.entry(&p.slot).or_default();
            match remaining.get_mut(&(p.slot.as_str(), p.value.as_str())) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    c.tp += 1;
                }
                _ => c.fp += 1,
            }
        }
        for ((slot, _), n) in remaining {
            per_type.entry(slot).or_default().fn_ += n;
        }
    }
    if gold_types.is_empty() {
        return Ok(if any_pred { 0.0 } else { 100.0 });
    }
    let total: f64 = gold_types
        .iter()
        .map(|t| {
            let c = per_type.get(t).copied().unwrap_or_default();
            let denom = 2 * c.tp + c.fp + c.fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * c.tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(100.0 * total / gold_types.len() as f64)
}

/// How the per-step average `Z_b` of LCA treats not-yet-learned tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LcaMode {
    /// Average over all `T` tasks at every step.
    #[default]
    AllTasks,
    /// Average over tasks `1..=b` only.
    SeenTasks,
}

/// `R[i][j]`: test score on task `j` after finishing task `i`, in training order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    tasks: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        Self { tasks, rows: Vec::new() }
    }

    pub fn from_rows(tasks: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks.len()
    }

    /// Records the row for the next finished task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.tasks.len() {
            return Err(MetricError::LengthMismatch {
                what: "row vs tasks",
                left: row.len(),
                right: self.tasks.len(),
            });
        }
        if self.rows.len() >= self.tasks.len() {
            return Err(MetricError::Malformed("matrix already complete".into()));
        }
        if let Some(&bad) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(MetricError::OutOfRange(bad));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    fn require_complete(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(MetricError::Empty("score matrix"));
        }
        if !self.is_complete() {
            return Err(MetricError::Incomplete(self.rows.len()));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_to(&mut w)?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Header `after_task,<task…>`, then one row per finished task.
    pub fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header = vec!["after_task".to_string()];
        header.extend(self.tasks.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![self.tasks[i].clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let tasks: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut m = Self::new(tasks);
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| MetricError::Malformed(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn score_avg(r: &ScoreMatrix) -> Result<f64> {
    r.require_complete()?;
    let last = r.rows.last().expect("complete matrix has rows");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// `Z_b` for every finished task `b`.
pub fn average_curve(r: &ScoreMatrix, mode: LcaMode) -> Vec<f64> {
    r.rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let cols = match mode {
                LcaMode::AllTasks => &row[..],
                LcaMode::SeenTasks => &row[..=i],
            };
            cols.iter().sum::<f64>() / cols.len() as f64
        })
        .collect()
}

/// Discrete normalized area under the `Z_b` curve: the mean of `Z_1..Z_T`.
pub fn lca(r: &ScoreMatrix, mode: LcaMode) -> Result<f64> {
    r.require_complete()?;
    let z = average_curve(r, mode);
    Ok(z.iter().sum::<f64>() / z.len() as f64)
}

/// Unique n-grams over total n-grams across all utterances.
pub fn dist_n<S: AsRef<str>>(utterances: &[Vec<S>], n: usize) -> Result<f64> {
    assert!(n >= 1, "n-gram order must be positive");
    if utterances.is_empty() {
        return Err(MetricError::Empty("corpus"));
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for u in utterances {
        if u.len() < n {
            continue;
        }
        for w in u.windows(n) {
            total += 1;
            unique.insert(w.iter().map(AsRef::as_ref).collect());
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}
