//! Experiment configuration, multi-order/multi-seed orchestration and the
//! on-disk artifacts of a run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{tokenize, DataError, StreamManifest, SyntheticConfig, TaskDataset, TaskKind, Vocab};
use crate::losses::LossConfig;
use crate::metrics::{dist_n, lca, score_avg, LcaMode, MetricError, ScoreMatrix};
use crate::model::{Model, ModelConfig, ModelError};
use crate::prompting::Reject;
use crate::replay::{
    run_stream, stream_vocab, EngineConfig, Learner, PseudoRecord, ReplayConfig, ReplayError, StepLog,
    StreamOutcome, TaskObserver, TaskReplayStats,
};
use crate::tensor::AdamConfig;
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to reproduce a set of runs. All fields default.
///
/// ```toml
/// manifest = "data/manifest.toml"   # omit to use the synthetic stream
/// output_dir = "out"
/// seeds = [1, 2, 3]
/// orders = [[0, 1, 2], [2, 0, 1]]   # omit for listing order
///
/// [replay]
/// strategy = "pcll"
/// gamma = 0.2
///
/// [model]
/// d_model = 64
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Permutations of task indices (manifest listing order).
    pub orders: Vec<Vec<usize>>,
    pub lca_mode: LcaMode,
    /// `replay.seed` is replaced by each entry of `seeds`.
    pub replay: ReplayConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// `model.vocab_size` is derived from the data.
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticConfig::default(),
            output_dir: PathBuf::from("out"),
            seeds: vec![0],
            orders: Vec::new(),
            lca_mode: LcaMode::AllTasks,
            replay: ReplayConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text, path)?;
        if let (Some(m), Some(base)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds: at least one seed is required".into()));
        }
        let mut engine = self.engine(0);
        engine.replay.seed = 0;
        engine
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    /// Orders to run for `n_tasks` tasks; listing order when none are given.
    pub fn resolved_orders(&self, n_tasks: usize) -> Result<Vec<Vec<usize>>> {
        if self.orders.is_empty() {
            return Ok(vec![(0..n_tasks).collect()]);
        }
        for (k, o) in self.orders.iter().enumerate() {
            let set: BTreeSet<usize> = o.iter().copied().collect();
            if o.len() != n_tasks || set.len() != n_tasks || set.iter().any(|&i| i >= n_tasks) {
                return Err(ExperimentError::Config(format!(
                    "orders[{k}]: {o:?} is not a permutation of 0..{n_tasks}"
                )));
            }
        }
        Ok(self.orders.clone())
    }

    pub fn engine(&self, seed: u64) -> EngineConfig {
        EngineConfig {
            replay: ReplayConfig {
                seed,
                ..self.replay.clone()
            },
            loss: self.loss,
            adam: self.adam,
        }
    }

    /// Tasks in listing order: the manifest's, or the synthetic stream.
    pub fn load_tasks(&self) -> Result<Vec<TaskDataset>> {
        match &self.manifest {
            Some(path) => Ok(StreamManifest::load(path)?.load_datasets()?),
            None => Ok(self.synthetic.generate()),
        }
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            ..self.model
        }
    }
}

/// Result of one `(order, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub order: usize,
    pub seed: u64,
    pub score: f64,
    pub lca: f64,
}

pub fn run_dir(root: &Path, order: usize, seed: u64) -> PathBuf {
    root.join(format!("order_{order}")).join(format!("seed_{seed}"))
}

/// Writes `checkpoints/task_<i>.json` after every task.
pub struct CheckpointWriter {
    dir: PathBuf,
}

impl CheckpointWriter {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }
}

impl<S: Scalar> TaskObserver<S> for CheckpointWriter {
    fn task_finished(&mut self, task: usize, learner: &Learner<S>, _row: &[f64]) -> std::result::Result<(), String> {
        let ck = Checkpoint::capture(learner.model(), learner.config(), learner.vocab(), learner.specs(), task + 1);
        ck.save(&self.dir.join(format!("task_{}.json", task + 1)))
            .map_err(|e| e.to_string())
    }
}

/// Runs every `(order, seed)` pair, writes per-run artifacts and the
/// aggregate report, and returns the per-run summaries.
pub fn run_experiment<S: Scalar>(cfg: &ExperimentConfig, force: bool) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let tasks = cfg.load_tasks()?;
    let orders = cfg.resolved_orders(tasks.len())?;
    let vocab = stream_vocab(&tasks);
    let root = &cfg.output_dir;

    let mut targets: Vec<PathBuf> = vec![root.join("aggregate.csv")];
    for k in 0..orders.len() {
        targets.extend(cfg.seeds.iter().map(|&s| run_dir(root, k, s)));
    }
    for t in &targets {
        if t.exists() {
            if !force {
                return Err(ExperimentError::Exists(t.clone()));
            }
            if t.is_dir() {
                fs::remove_dir_all(t).map_err(io_err(t))?;
            } else {
                fs::remove_file(t).map_err(io_err(t))?;
            }
        }
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    let cfg_path = root.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;

    let mut summaries = Vec::new();
    for (k, order) in orders.iter().enumerate() {
        let ordered: Vec<TaskDataset> = order.iter().map(|&i| tasks[i].clone()).collect();
        for &seed in &cfg.seeds {
            let dir = run_dir(root, k, seed);
            log::info!("run order {k} {:?} seed {seed} -> {}", order, dir.display());
            let summary = run_once::<S>(cfg, &ordered, vocab.clone(), seed, &dir, k)?;
            summaries.push(summary);
        }
    }
    write_aggregate(&root.join("aggregate.csv"), &summaries)?;
    Ok(summaries)
}

/// One stream over already-ordered tasks with all artifacts under `dir`.
pub fn run_once<S: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &[TaskDataset],
    vocab: Vocab,
    seed: u64,
    dir: &Path,
    order_index: usize,
) -> Result<RunSummary> {
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
    let model = Model::<S>::new(cfg.model_config(&vocab), seed)?;
    let mut writer = CheckpointWriter::new(ck_dir);
    let outcome = run_stream(tasks, vocab, model, cfg.engine(seed), &mut writer)?;
    write_run_artifacts(dir, &outcome, cfg.lca_mode)?;
    Ok(RunSummary {
        order: order_index,
        seed,
        score: score_avg(&outcome.scores)?,
        lca: lca(&outcome.scores, cfg.lca_mode)?,
    })
}

/// `R.csv`, `report.csv`, `loss_log.csv`, `pseudo.csv` and `replay_stats.csv`.
pub fn write_run_artifacts<S>(dir: &Path, out: &StreamOutcome<S>, mode: LcaMode) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let r_path = dir.join("R.csv");
    out.scores.write_csv(&r_path)?;
    write_report(&dir.join("report.csv"), out, mode)?;
    write_serialized(&dir.join("loss_log.csv"), &out.step_logs)?;
    write_pseudo_csv(&dir.join("pseudo.csv"), &out.pseudo_records)?;
    let stats: Vec<ReplayStatsRow> = out
        .replay_stats
        .iter()
        .map(|(replay_for, s)| ReplayStatsRow::new(replay_for, s))
        .collect();
    write_serialized(&dir.join("replay_stats.csv"), &stats)?;
    Ok(())
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads any CSV written by this module back into its row type.
pub fn read_serialized<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err(path))
}

/// Flat row of the pseudo-sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRow {
    pub replay_for: String,
    pub task: String,
    pub attempt: usize,
    pub accepted: bool,
    pub reason: Option<Reject>,
    pub utterance: Option<String>,
    pub output: Option<String>,
    pub provenance: crate::data::Provenance,
}

impl From<&PseudoRecord> for PseudoRow {
    fn from(r: &PseudoRecord) -> Self {
        Self {
            replay_for: r.replay_for.clone(),
            task: r.task.clone(),
            attempt: r.attempt,
            accepted: r.accepted,
            reason: r.reason,
            utterance: r.utterance.clone(),
            output: r.output.clone(),
            provenance: r.provenance,
        }
    }
}

/// Writes the dump; an empty list still produces the header line.
pub fn write_pseudo_csv(path: &Path, records: &[PseudoRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if records.is_empty() {
        w.write_record([
            "replay_for",
            "task",
            "attempt",
            "accepted",
            "reason",
            "utterance",
            "output",
            "provenance",
        ])
        .map_err(csv_err(path))?;
    }
    for r in records {
        w.serialize(PseudoRow::from(r)).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStatsRow {
    pub replay_for: String,
    pub task: String,
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
    pub shortfall: usize,
    /// `reason:count` pairs separated by `;`.
    pub rejects: String,
}

impl ReplayStatsRow {
    fn new(replay_for: &str, s: &TaskReplayStats) -> Self {
        let rejects = s
            .rejects
            .iter()
            .map(|(r, n)| format!("{}:{n}", reject_name(*r)))
            .collect::<Vec<_>>()
            .join(";");
        Self {
            replay_for: replay_for.to_string(),
            task: s.task.clone(),
            requested: s.requested,
            accepted: s.accepted,
            attempts: s.attempts,
            shortfall: s.shortfall,
            rejects,
        }
    }
}

fn reject_name(r: Reject) -> String {
    serde_json::to_value(r)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Long-format metrics row: `metric,after_task,task,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub after_task: Option<String>,
    pub task: Option<String>,
    pub value: f64,
}

impl ReportRow {
    fn global(metric: &str, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            after_task: None,
            task: None,
            value,
        }
    }
}

pub fn report_rows<S>(out: &StreamOutcome<S>, mode: LcaMode) -> Result<Vec<ReportRow>> {
    let r = &out.scores;
    let mut rows = Vec::new();
    for (i, row) in r.rows().iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            rows.push(ReportRow {
                metric: "R".into(),
                after_task: Some(r.tasks()[i].clone()),
                task: Some(r.tasks()[j].clone()),
                value: *v,
            });
        }
    }
    rows.push(ReportRow::global("score", score_avg(r)?));
    rows.push(ReportRow::global("lca", lca(r, mode)?));
    let other = match mode {
        LcaMode::AllTasks => LcaMode::SeenTasks,
        LcaMode::SeenTasks => LcaMode::AllTasks,
    };
    rows.push(ReportRow::global(
        match other {
            LcaMode::SeenTasks => "lca_seen",
            LcaMode::AllTasks => "lca_all",
        },
        lca(r, other)?,
    ));
    let inputs = out.accepted_inputs();
    if !inputs.is_empty() {
        for n in 1..=4 {
            rows.push(ReportRow::global(&format!("dist_{n}"), dist_n(&inputs, n)?));
        }
    }
    for task in r.tasks() {
        let (attempts, rejected) = out
            .replay_stats
            .iter()
            .filter(|(_, s)| &s.task == task)
            .fold((0, 0), |(a, rj), (_, s)| (a + s.attempts, rj + s.rejects.values().sum::<usize>()));
        if attempts > 0 {
            rows.push(ReportRow {
                metric: "reject_rate".into(),
                after_task: None,
                task: Some(task.clone()),
                value: rejected as f64 / attempts as f64,
            });
        }
    }
    Ok(rows)
}

fn write_report<S>(path: &Path, out: &StreamOutcome<S>, mode: LcaMode) -> Result<()> {
    write_serialized(path, &report_rows(out, mode)?)
}

/// Per-run rows followed by one `mean` row per order and an overall mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub order: String,
    pub seed: String,
    pub score: f64,
    pub lca: f64,
}

pub fn aggregate_rows(runs: &[RunSummary]) -> Vec<AggregateRow> {
    let mean = |rs: &[&RunSummary]| {
        let n = rs.len() as f64;
        (
            rs.iter().map(|r| r.score).sum::<f64>() / n,
            rs.iter().map(|r| r.lca).sum::<f64>() / n,
        )
    };
    let mut rows: Vec<AggregateRow> = runs
        .iter()
        .map(|r| AggregateRow {
            order: r.order.to_string(),
            seed: r.seed.to_string(),
            score: r.score,
            lca: r.lca,
        })
        .collect();
    let orders: BTreeSet<usize> = runs.iter().map(|r| r.order).collect();
    for o in orders {
        let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.order == o).collect();
        let (score, lca) = mean(&rs);
        rows.push(AggregateRow {
            order: o.to_string(),
            seed: "mean".into(),
            score,
            lca,
        });
    }
    if !runs.is_empty() {
        let all: Vec<&RunSummary> = runs.iter().collect();
        let (score, lca) = mean(&all);
        rows.push(AggregateRow {
            order: "all".into(),
            seed: "mean".into(),
            score,
            lca,
        });
    }
    rows
}

fn write_aggregate(path: &Path, runs: &[RunSummary]) -> Result<()> {
    write_serialized(path, &aggregate_rows(runs))
}

/// Output of the `generate` inspection utility.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateReport {
    pub records: Vec<PseudoRecord>,
    /// Dist-1..4 of the accepted inputs; `None` when nothing was accepted.
    pub dist: Vec<Option<f64>>,
}

/// Runs `count` generation attempts for `task` from a checkpoint.
pub fn generate_from_checkpoint<S: Scalar>(ck: &Checkpoint, task: &str, count: usize, seed: u64) -> Result<GenerateReport> {
    let idx = ck
        .task_index(task)
        .ok_or_else(|| ExperimentError::UnknownTask(task.to_string()))?;
    let model: Model<S> = ck.model()?;
    let engine = EngineConfig {
        replay: ReplayConfig {
            seed,
            ..ck.engine.replay.clone()
        },
        ..ck.engine.clone()
    };
    let mut learner = Learner::new(model, ck.vocab.clone(), ck.tasks.clone(), engine)?;
    let mut records = Vec::with_capacity(count);
    for attempt in 1..=count {
        records.push(learner.pseudo_attempt(idx, "generate", attempt)?);
    }
    let accepted: Vec<Vec<String>> = records
        .iter()
        .filter(|r| r.accepted)
        .filter_map(|r| r.utterance.as_deref().map(tokenize))
        .collect();
    let dist = (1..=4)
        .map(|n| (!accepted.is_empty()).then(|| dist_n(&accepted, n)).transpose())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(GenerateReport { records, dist })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistRow {
    pub n: usize,
    pub dist: Option<f64>,
}

/// Recomputes Dist-1..4 from a dump written by [`write_pseudo_csv`].
pub fn dist_from_dump(path: &Path) -> Result<Vec<Option<f64>>> {
    let rows: Vec<PseudoRow> = read_serialized(path)?;
    let accepted: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.accepted)
        .filter_map(|r| r.utterance.as_deref().map(tokenize))
        .collect();
    (1..=4)
        .map(|n| (!accepted.is_empty()).then(|| dist_n(&accepted, n)).transpose())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(Into::into)
}

pub fn write_dist_csv(path: &Path, dist: &[Option<f64>]) -> Result<()> {
    let rows: Vec<DistRow> = dist
        .iter()
        .enumerate()
        .map(|(i, d)| DistRow { n: i + 1, dist: *d })
        .collect();
    write_serialized(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub kind: TaskKind,
    pub n_test: usize,
    pub score: f64,
}

/// Scores a checkpoint on the test split of every task in `manifest`.
pub fn evaluate_checkpoint<S: Scalar>(ck: &Checkpoint, manifest: &Path) -> Result<Vec<EvalRow>> {
    let tasks = StreamManifest::load(manifest)?.load_datasets()?;
    let model: Model<S> = ck.model()?;
    let learner = Learner::new(model, ck.vocab.clone(), ck.tasks.clone(), ck.engine.clone())?;
    let mut rows = Vec::new();
    for d in &tasks {
        let idx = ck
            .task_index(&d.name)
            .ok_or_else(|| ExperimentError::VocabMismatch(format!("task `{}` is not in the checkpoint", d.name)))?;
        if d.test.is_empty() {
            return Err(DataError::EmptySplit {
                path: manifest.to_path_buf(),
                split: "test",
            }
            .into());
        }
        for s in &d.test {
            let words = s
                .utterance
                .iter()
                .cloned()
                .chain(crate::prompting::serialize_output(&s.output));
            if let Some(w) = words.into_iter().find(|w| !ck.vocab.contains(w)) {
                return Err(ExperimentError::VocabMismatch(format!(
                    "token `{w}` of task `{}` is not in the checkpoint vocabulary",
                    d.name
                )));
            }
        }
        rows.push(EvalRow {
            task: d.name.clone(),
            kind: d.kind,
            n_test: d.test.len(),
            score: learner.evaluate(idx, &d.test)?,
        });
    }
    Ok(rows)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    write_serialized(path, rows)
}

/// Re-reads a run's score matrix.
pub fn read_scores(dir: &Path) -> Result<ScoreMatrix> {
    Ok(ScoreMatrix::read_csv(&dir.join("R.csv"))?)
}

pub fn read_step_logs(path: &Path) -> Result<Vec<StepLog>> {
    read_serialized(path)
}
