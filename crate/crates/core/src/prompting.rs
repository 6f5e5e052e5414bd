//! Natural-language prompt wrappers `prefix ⊕ x ⊕ postfix ⊕ y`, output
//! serialization, and parsing of generated token sequences.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_text, Output, Provenance, Sample, SlotPair, TaskKind, Vocab, BOS, EOS};

pub const NAME_PLACEHOLDER: &str = "{name}";
/// Stand-in for the task name when task identity is withheld.
pub const GENERIC_TASK_NAME: &str = "current";
pub const NO_SLOT: &str = "no slot in this sentence .";
const SLOT_PREFIX: &str = "in the {name} task , if there are any slots and values , what are they in this sentence :";
const SLOT_POSTFIX: &str = "? answer :";
/// Answer marker used by special-token templates.
pub const ANSWER_TOKEN: &str = "__ans__";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("utterance is empty")]
    EmptyInput,
    #[error("templates and output need {needed} tokens, context holds {max_len}")]
    TooLong { needed: usize, max_len: usize },
    #[error("template {0:?} must contain {NAME_PLACEHOLDER} exactly once")]
    BadTemplate(String),
}

/// Intent-detection template variants; `Prompt1` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePreset {
    #[default]
    Prompt1,
    Prompt2,
    Prompt3,
    Prompt4,
    Prompt5,
}

impl TemplatePreset {
    pub fn intent_templates(self) -> (&'static str, &'static str) {
        match self {
            Self::Prompt1 => ("for an utterance from the {name} task ,", "has the following intent"),
            Self::Prompt2 => ("in the {name} task , what intent best describes :", "? answer :"),
            Self::Prompt3 => ("task {name} utterance", "intent"),
            Self::Prompt4 => ("in the task {name} , this utterance", "has the intent of"),
            Self::Prompt5 => (
                "if we consider the intent detection task , for a sample in the {name} task , what's the intent of the utterance",
                "? the intent is :",
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Word-level, lowercase; holds `{name}` once.
    pub prefix_template: String,
    pub postfix_template: String,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind) -> Self {
        Self::with_preset(name, kind, TemplatePreset::default())
    }

    /// Slot tasks always use the slot template; `preset` picks the intent one.
    pub fn with_preset(name: &str, kind: TaskKind, preset: TemplatePreset) -> Self {
        let (pre, post) = match kind {
            TaskKind::Intent => preset.intent_templates(),
            TaskKind::Slot => (SLOT_PREFIX, SLOT_POSTFIX),
        };
        Self {
            name: name.to_string(),
            kind,
            prefix_template: pre.to_string(),
            postfix_template: post.to_string(),
        }
    }

    /// Single task-specific marker token before `x` and a shared answer token after it.
    pub fn special_token(name: &str, kind: TaskKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            prefix_template: "__{name}__".to_string(),
            postfix_template: ANSWER_TOKEN.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.prefix_template.matches(NAME_PLACEHOLDER).count() != 1 {
            return Err(PromptError::BadTemplate(self.prefix_template.clone()));
        }
        if self.postfix_template.split_whitespace().next().is_none() {
            return Err(PromptError::BadTemplate(self.postfix_template.clone()));
        }
        Ok(())
    }

    fn name_token(&self) -> String {
        normalize_text(&self.name)
    }

    pub fn prefix_words(&self, no_task_id: bool) -> Vec<String> {
        let name = if no_task_id {
            GENERIC_TASK_NAME.to_string()
        } else {
            self.name_token()
        };
        self.prefix_template
            .replace(NAME_PLACEHOLDER, &name)
            .split_whitespace()
            .map(str::to_lowercase)
            .collect()
    }

    pub fn postfix_words(&self) -> Vec<String> {
        self.postfix_template
            .split_whitespace()
            .map(str::to_lowercase)
            .collect()
    }

    /// Every token the templates can emit, for forced vocabulary inclusion.
    pub fn template_words(&self) -> Vec<String> {
        let mut w = self.prefix_words(false);
        w.extend(self.prefix_words(true));
        w.extend(self.postfix_words());
        if self.kind == TaskKind::Slot {
            w.extend(NO_SLOT.split_whitespace().map(str::to_string));
            w.extend([":", ";", "."].map(str::to_string));
        }
        w
    }
}

/// Rendering options shared by a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub no_task_id: bool,
    pub max_len: usize,
}

/// Token ids of `[BOS] prefix x postfix [y [EOS]]` with span boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub ids: Vec<usize>,
    pub prefix: Range<usize>,
    pub x: Range<usize>,
    pub postfix: Range<usize>,
    /// Output tokens, excluding the closing `[EOS]`.
    pub y: Option<Range<usize>>,
}

impl RenderedPrompt {
    /// `[BOS] ⊕ prefix`.
    pub fn prompt_head(&self) -> &[usize] {
        &self.ids[..self.prefix.end]
    }

    /// `[BOS] ⊕ prefix ⊕ x ⊕ postfix`.
    pub fn question(&self) -> &[usize] {
        &self.ids[..self.postfix.end]
    }
}

/// Output `y` as word tokens.
pub fn serialize_output(output: &Output) -> Vec<String> {
    let text = match output {
        Output::Intent(label) => normalize_text(label),
        Output::Slots(pairs) if pairs.is_empty() => NO_SLOT.to_string(),
        Output::Slots(pairs) => {
            let body = pairs
                .iter()
                .map(|p| format!("{} : {}", normalize_text(&p.slot), normalize_text(&p.value)))
                .collect::<Vec<_>>()
                .join(" ; ");
            format!("{body} .")
        }
    };
    text.split_whitespace().map(str::to_string).collect()
}

/// Inverse of [`serialize_output`]; `None` when the tokens do not form a valid output.
pub fn parse_output(kind: TaskKind, words: &[String]) -> Option<Output> {
    if words.is_empty() {
        return None;
    }
    match kind {
        TaskKind::Intent => Some(Output::Intent(words.join(" "))),
        TaskKind::Slot => {
            let text = words.join(" ");
            if text == NO_SLOT {
                return Some(Output::Slots(Vec::new()));
            }
            let body = words.strip_suffix(&[".".to_string()]).unwrap_or(words);
            let mut pairs = Vec::new();
            for segment in body.split(|w| w == ";") {
                let colon = segment.iter().position(|w| w == ":")?;
                let (slot, value) = (&segment[..colon], &segment[colon + 1..]);
                if slot.is_empty() || value.is_empty() || value.iter().any(|w| w == ":") {
                    return None;
                }
                pairs.push(SlotPair {
                    slot: slot.join(" "),
                    value: value.join(" "),
                });
            }
            Some(Output::Slots(pairs))
        }
    }
}

/// Renders `g_t(x, y)` (or `g_t(x)` when `y` is `None`). Overlong inputs are
/// handled by truncating `x`; the templates and `y` are never cut.
pub fn render_with(
    vocab: &Vocab,
    task: &TaskSpec,
    x: &[String],
    y: Option<&Output>,
    opts: PromptOptions,
) -> Result<RenderedPrompt, PromptError> {
    if x.is_empty() {
        return Err(PromptError::EmptyInput);
    }
    let prefix = vocab.encode(&task.prefix_words(opts.no_task_id));
    let postfix = vocab.encode(&task.postfix_words());
    let y_ids = y.map(|o| vocab.encode(&serialize_output(o)));
    let fixed = 1 + prefix.len() + postfix.len() + y_ids.as_ref().map_or(0, |y| y.len() + 1);
    if fixed + 1 > opts.max_len {
        return Err(PromptError::TooLong {
            needed: fixed + 1,
            max_len: opts.max_len,
        });
    }
    let x_ids = vocab.encode(&x[..x.len().min(opts.max_len - fixed)]);

    let mut ids = Vec::with_capacity(fixed + x_ids.len());
    ids.push(BOS);
    let p0 = ids.len();
    ids.extend(&prefix);
    let x0 = ids.len();
    ids.extend(&x_ids);
    let q0 = ids.len();
    ids.extend(&postfix);
    let y0 = ids.len();
    let y_span = y_ids.map(|y| {
        ids.extend(&y);
        let end = ids.len();
        ids.push(EOS);
        y0..end
    });
    Ok(RenderedPrompt {
        prefix: p0..x0,
        x: x0..q0,
        postfix: q0..y0,
        y: y_span,
        ids,
    })
}

pub fn render(
    vocab: &Vocab,
    task: &TaskSpec,
    x: &[String],
    y: Option<&Output>,
    max_len: usize,
) -> Result<RenderedPrompt, PromptError> {
    render_with(
        vocab,
        task,
        x,
        y,
        PromptOptions {
            no_task_id: false,
            max_len,
        },
    )
}

/// As [`render`] with the task name replaced by a generic description.
pub fn render_no_task_id(
    vocab: &Vocab,
    task: &TaskSpec,
    x: &[String],
    y: Option<&Output>,
    max_len: usize,
) -> Result<RenderedPrompt, PromptError> {
    render_with(
        vocab,
        task,
        x,
        y,
        PromptOptions {
            no_task_id: true,
            max_len,
        },
    )
}

/// Why a generated sequence could not be turned into a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reject {
    PrefixMismatch,
    MissingPostfix,
    EmptyInput,
    EmptyOutput,
    ReservedToken,
    BadOutput,
    TooLong,
}

fn find_subsequence(haystack: &[usize], needle: &[usize], from: usize) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

/// Splits a generated sequence into `(x, y)`. A leading `[BOS]` is optional
/// and `y` ends at the first `[EOS]` (or the end of the sequence).
pub fn parse_generated(
    vocab: &Vocab,
    task: &TaskSpec,
    ids: &[usize],
    no_task_id: bool,
) -> Result<Sample, Reject> {
    let ids = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    let prefix = vocab.encode(&task.prefix_words(no_task_id));
    let postfix = vocab.encode(&task.postfix_words());
    if !ids.starts_with(&prefix) {
        return Err(Reject::PrefixMismatch);
    }
    let q0 = find_subsequence(ids, &postfix, prefix.len()).ok_or(Reject::MissingPostfix)?;
    let x_ids = &ids[prefix.len()..q0];
    if x_ids.is_empty() {
        return Err(Reject::EmptyInput);
    }
    let rest = &ids[q0 + postfix.len()..];
    let y_ids = &rest[..rest.iter().position(|&t| t == EOS).unwrap_or(rest.len())];
    if y_ids.is_empty() {
        return Err(Reject::EmptyOutput);
    }
    if x_ids.iter().chain(y_ids).any(|&t| Vocab::is_reserved(t)) {
        return Err(Reject::ReservedToken);
    }
    let output = parse_output(task.kind, &vocab.decode(y_ids)).ok_or(Reject::BadOutput)?;
    Ok(Sample {
        utterance: vocab.decode(x_ids),
        output,
        provenance: Provenance::Pseudo,
    })
}
