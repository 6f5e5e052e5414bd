use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Output, Sample, TaskDataset, TaskKind};

const TASK_NAMES: [&str; 10] = [
    "banking", "travel", "music", "weather", "cooking", "sports", "health", "shopping", "movies", "transit",
];
const ACTIONS: [&str; 8] = ["query", "order", "cancel", "update", "report", "check", "book", "remove"];
/// Shared across tasks; never used as labels or template markers.
const FUNCTION_WORDS: [&str; 8] = ["please", "my", "a", "can", "you", "now", "i", "want"];

/// Parameters of the synthetic intent-detection stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_tasks: usize,
    /// Total samples per task across train/valid/test.
    pub n_per_task: usize,
    pub vocab_size_per_task: usize,
    pub intents_per_task: usize,
    pub keywords_per_intent: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_tasks: 3,
            n_per_task: 300,
            vocab_size_per_task: 24,
            intents_per_task: 4,
            keywords_per_intent: 3,
        }
    }
}

/// Convenience wrapper over [`SyntheticConfig::generate`] with default label
/// structure.
pub fn gen_synthetic_stream(
    seed: u64,
    n_tasks: usize,
    n_per_task: usize,
    vocab_size_per_task: usize,
) -> Vec<TaskDataset> {
    SyntheticConfig {
        seed,
        n_tasks,
        n_per_task,
        vocab_size_per_task,
        ..SyntheticConfig::default()
    }
    .generate()
}

fn task_name(i: usize) -> String {
    TASK_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("task{i}"))
}

impl SyntheticConfig {
    /// Builds `n_tasks` intent tasks with pairwise-disjoint content words and
    /// label sets. An utterance's intent is fixed by which keywords it holds.
    /// Splits are 2/3 train, 1/6 valid, remainder test, with no utterance
    /// repeated within a task.
    pub fn generate(&self) -> Vec<TaskDataset> {
        assert!(self.n_tasks >= 2, "a stream needs at least two tasks");
        assert!(self.intents_per_task >= 2 && self.intents_per_task <= ACTIONS.len());
        let n_keywords = self.intents_per_task * self.keywords_per_intent;
        assert!(
            self.vocab_size_per_task > n_keywords,
            "vocab_size_per_task must leave room for filler words"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_tasks).map(|t| self.generate_task(t, &mut rng)).collect()
    }

    fn generate_task(&self, t: usize, rng: &mut ChaCha8Rng) -> TaskDataset {
        let name = task_name(t);
        let words: Vec<String> = (0..self.vocab_size_per_task).map(|i| format!("{name}{i:02}")).collect();
        let n_keywords = self.intents_per_task * self.keywords_per_intent;
        let (keywords, fillers) = words.split_at(n_keywords);
        let labels: Vec<String> = ACTIONS[..self.intents_per_task]
            .iter()
            .map(|a| format!("{name}_{a}"))
            .collect();

        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(self.n_per_task);
        let mut attempts = 0;
        while samples.len() < self.n_per_task {
            attempts += 1;
            assert!(attempts < self.n_per_task * 100, "synthetic space too small");
            let intent = rng.random_range(0..self.intents_per_task);
            let own = &keywords[intent * self.keywords_per_intent..(intent + 1) * self.keywords_per_intent];
            let len = rng.random_range(3..=8);
            let n_kw = (len / 2).max(1);
            let mut utt: Vec<&str> = Vec::with_capacity(len);
            for _ in 0..n_kw {
                utt.push(own.choose(rng).unwrap());
            }
            while utt.len() < len {
                if rng.random_bool(0.6) {
                    utt.push(fillers.choose(rng).unwrap());
                } else {
                    utt.push(FUNCTION_WORDS.choose(rng).unwrap());
                }
            }
            utt.shuffle(rng);
            let text = utt.join(" ");
            if seen.insert(text.clone()) {
                samples.push(Sample::new(&text, Output::Intent(labels[intent].clone())));
            }
        }
        let n_train = self.n_per_task * 2 / 3;
        let n_valid = self.n_per_task / 6;
        let test = samples.split_off(n_train + n_valid);
        let valid = samples.split_off(n_train);
        TaskDataset {
            name,
            kind: TaskKind::Intent,
            train: samples,
            valid,
            test,
        }
    }
}
