use super::learner::task_specs;
use super::{
    Counters, EngineConfig, Learner, PseudoRecord, ReplayError, Result, StepLog, Strategy, TaskReplayStats,
};
use crate::data::{TaskDataset, Vocab};
use crate::metrics::ScoreMatrix;
use crate::model::Model;
use crate::Scalar;

/// Hook called after each task is trained and evaluated, e.g. to write a
/// checkpoint.
pub trait TaskObserver<S> {
    fn task_finished(&mut self, task: usize, learner: &Learner<S>, row: &[f64]) -> std::result::Result<(), String>;
}

impl<S> TaskObserver<S> for () {
    fn task_finished(&mut self, _: usize, _: &Learner<S>, _: &[f64]) -> std::result::Result<(), String> {
        Ok(())
    }
}

pub struct StreamOutcome<S> {
    pub scores: ScoreMatrix,
    pub step_logs: Vec<StepLog>,
    pub pseudo_records: Vec<PseudoRecord>,
    /// Per previous task, for every task that triggered replay.
    pub replay_stats: Vec<(String, TaskReplayStats)>,
    pub counters: Counters,
    pub model: Model<S>,
}

impl<S> StreamOutcome<S> {
    /// Inputs of every accepted pseudo sample, tokenized.
    pub fn accepted_inputs(&self) -> Vec<Vec<String>> {
        self.pseudo_records
            .iter()
            .filter(|r| r.accepted)
            .filter_map(|r| r.utterance.as_ref())
            .map(|u| u.split_whitespace().map(str::to_string).collect())
            .collect()
    }
}

/// Learns `tasks` in the given order. Before each task the teacher is
/// frozen and the replay mix built; after it every task's test set is
/// scored into the next row of `R`.
pub fn run_stream<S: Scalar>(
    tasks: &[TaskDataset],
    vocab: Vocab,
    model: Model<S>,
    config: EngineConfig,
    observer: &mut dyn TaskObserver<S>,
) -> Result<StreamOutcome<S>> {
    if tasks.is_empty() {
        return Err(ReplayError::Config("task stream is empty".into()));
    }
    let specs = task_specs(config.replay.strategy, tasks);
    let mut learner = Learner::new(model, vocab, specs, config)?;
    let rc = learner.config().replay.clone();
    let mut scores = ScoreMatrix::new(tasks.iter().map(|t| t.name.clone()).collect());
    let mut step_logs = Vec::new();
    let mut pseudo_records = Vec::new();
    let mut replay_stats = Vec::new();

    for (t, data) in tasks.iter().enumerate() {
        log::info!("task {}/{}: {}", t + 1, tasks.len(), data.name);
        let teacher = (t > 0 && rc.uses_kd()).then(|| learner.snapshot_teacher());
        let mix = learner.build_replay_mix(t, data.train.len())?;
        replay_stats.extend(mix.stats.into_iter().map(|s| (data.name.clone(), s)));
        pseudo_records.extend(mix.records);
        step_logs.extend(learner.train_task(t, &data.train, &mix.items, teacher.as_ref())?);
        if rc.strategy == Strategy::Er {
            learner.remember(t, &data.train)?;
        }
        let row = tasks
            .iter()
            .enumerate()
            .map(|(j, d)| learner.evaluate(j, &d.test))
            .collect::<Result<Vec<_>>>()?;
        log::info!("after {}: {:?}", data.name, row);
        observer
            .task_finished(t, &learner, &row)
            .map_err(ReplayError::Observer)?;
        scores.push_row(row)?;
    }
    Ok(StreamOutcome {
        scores,
        step_logs,
        pseudo_records,
        replay_stats,
        counters: learner.counters(),
        model: learner.into_model(),
    })
}

/// Vocabulary over all tasks plus every template token any strategy can
/// emit, so checkpoints are interchangeable across strategies.
pub fn stream_vocab(tasks: &[TaskDataset]) -> Vocab {
    let mut forced: Vec<String> = Vec::new();
    for d in tasks {
        for spec in [
            crate::prompting::TaskSpec::new(&d.name, d.kind),
            crate::prompting::TaskSpec::special_token(&d.name, d.kind),
        ] {
            forced.extend(spec.template_words());
        }
    }
    crate::data::build_vocab(tasks, 1, forced.iter().map(String::as_str))
}
