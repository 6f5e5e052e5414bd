use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Output, TaskDataset};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

/// Frozen word-level vocabulary with dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved tokens followed by `words` in the given order (duplicates dropped).
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.to_string()) {
                tokens.push(w.to_string());
            }
        }
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode_token(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_token(t.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

/// Builds the stream-wide vocabulary. Corpus tokens need `min_count`
/// occurrences; output-label tokens and `forced` (template) tokens are always
/// included. Non-reserved tokens are ordered lexicographically.
pub fn build_vocab<'a>(
    datasets: &[TaskDataset],
    min_count: usize,
    forced: impl IntoIterator<Item = &'a str>,
) -> Vocab {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut keep: BTreeSet<String> = forced
        .into_iter()
        .flat_map(|s| s.split_whitespace())
        .map(str::to_string)
        .collect();
    for ds in datasets {
        for s in ds.all_samples() {
            for t in &s.utterance {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            match &s.output {
                Output::Intent(label) => keep.extend(label.split_whitespace().map(str::to_string)),
                Output::Slots(pairs) => {
                    for p in pairs {
                        keep.extend(p.slot.split_whitespace().map(str::to_string));
                        for v in p.value.split_whitespace() {
                            *counts.entry(v).or_default() += 1;
                        }
                    }
                }
            }
        }
    }
    keep.extend(
        counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(t, _)| t.to_string()),
    );
    Vocab::from_words(keep.iter().map(String::as_str))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, TaskKind};

    fn ds(utts: &[&str]) -> TaskDataset {
        TaskDataset {
            name: "t".into(),
            kind: TaskKind::Intent,
            train: utts
                .iter()
                .map(|u| Sample::new(u, Output::Intent("lbl".into())))
                .collect(),
            valid: vec![],
            test: vec![],
        }
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = build_vocab(&[ds(&["a"])], 1, []);
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[BOS]"), Some(BOS));
        assert_eq!(v.id("[EOS]"), Some(EOS));
        assert_eq!(v.id("[UNK]"), Some(UNK));
    }

    #[test]
    fn min_count_filters_corpus_tokens() {
        let v = build_vocab(&[ds(&["a b", "a"])], 2, []);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        let v1 = build_vocab(&[ds(&["a b", "a"])], 1, []);
        assert!(v1.contains("a") && v1.contains("b"));
    }

    #[test]
    fn template_and_label_tokens_forced() {
        let v = build_vocab(&[ds(&["a b"])], 5, ["has the following intent"]);
        assert!(v.contains("intent"));
        assert!(v.contains("lbl"));
        assert!(!v.contains("a"));
    }

    #[test]
    fn oov_maps_to_unk_and_ids_are_dense() {
        let v = build_vocab(&[ds(&["x y z"])], 1, []);
        assert_eq!(v.encode_text("x nope"), vec![v.id("x").unwrap(), UNK]);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
    }
}
