//! Instruction-tuning corpora for the six alignment tasks.
//!
//! Histories are always rendered with item titles. Semantic-id tokens are
//! inserted verbatim and never split. Every instance records where the
//! response starts so a trainer can restrict the loss to the answer.

mod chat;
mod mix;
mod summarize;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use chat::{ChatMessage, ChatRequest, ChatSummarizer, ChatTransport, SummaryCache};
pub use mix::{allocate, mix, MixReport, MixtureConfig};
pub use summarize::{
    ExtractiveSummarizer, PreferenceSummary, Summarizer, DEFAULT_TERMS, NO_PREFERENCES, STOPWORDS,
};

use crate::error::{Error, Result};

pub const TEMPLATE_VERSION: &str = "v1";
/// Most recent history entries shown in any prompt.
pub const MAX_HISTORY: usize = 20;
pub const DEFAULT_CANDIDATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NextItem,
    IndexToPref,
    PrefToIndex,
    HistoryToIndex,
    RatingPred,
    IntentItem,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::NextItem,
        TaskKind::IndexToPref,
        TaskKind::PrefToIndex,
        TaskKind::HistoryToIndex,
        TaskKind::RatingPred,
        TaskKind::IntentItem,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::NextItem => "next_item",
            TaskKind::IndexToPref => "index_to_pref",
            TaskKind::PrefToIndex => "pref_to_index",
            TaskKind::HistoryToIndex => "history_to_index",
            TaskKind::RatingPred => "rating_pred",
            TaskKind::IntentItem => "intent_item",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub task: TaskKind,
    pub user_id: String,
    pub input: String,
    pub target: String,
    /// Character offset of the response in `input + target`.
    pub response_offset: usize,
}

impl PromptInstance {
    fn new(task: TaskKind, user_id: &str, input: String, target: String) -> Self {
        PromptInstance {
            task,
            user_id: user_id.to_string(),
            response_offset: input.chars().count(),
            input,
            target,
        }
    }

    /// Prompt followed by the response.
    pub fn full_text(&self) -> String {
        format!("{}{}", self.input, self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    GroundTruthNotRetrieved,
    MissingSummary,
    EmptyHistory,
    MissingRating,
}

/// Label for candidate `i`: `A..Z`, then `AA, AB, ...`.
pub fn index_letter(i: usize) -> String {
    if i < 26 {
        ((b'A' + i as u8) as char).to_string()
    } else {
        let j = i - 26;
        let first = (b'A' + (j / 26) as u8) as char;
        let second = (b'A' + (j % 26) as u8) as char;
        format!("{first}{second}")
    }
}

/// Inverse of [`index_letter`].
pub fn letter_index(label: &str) -> Option<usize> {
    let b = label.as_bytes();
    match b {
        [c] if c.is_ascii_uppercase() => Some((c - b'A') as usize),
        [c1, c2] if c1.is_ascii_uppercase() && c2.is_ascii_uppercase() => {
            Some(26 + (c1 - b'A') as usize * 26 + (c2 - b'A') as usize)
        }
        _ => None,
    }
}

/// Ratings are whole or half stars; anything else is rounded to the nearest half.
pub fn render_rating(rating: f64) -> String {
    let halves = (rating * 2.0).round() as i64;
    if halves % 2 == 0 {
        (halves / 2).to_string()
    } else {
        format!("{}.5", halves / 2)
    }
}

fn recent<T>(items: &[T]) -> &[T] {
    &items[items.len().saturating_sub(MAX_HISTORY)..]
}

fn section(out: &mut String, header: &str, body: &str) {
    let _ = write!(out, "### {header}:\n{body}\n\n");
}

fn history_block<S: AsRef<str>>(titles: &[S]) -> String {
    let mut out = String::from("History (oldest first):\n");
    for (n, t) in recent(titles).iter().enumerate() {
        let _ = writeln!(out, "{}. {}", n + 1, t.as_ref());
    }
    out
}

fn candidate_block<S: AsRef<str>>(candidates: &[S]) -> String {
    let mut out = String::from("Candidates:\n");
    for (i, t) in candidates.iter().enumerate() {
        let _ = writeln!(out, "({}) {}", index_letter(i), t.as_ref());
    }
    out
}

fn finish(instruction: &str, input: &str) -> String {
    let mut out = String::new();
    section(&mut out, "Instruction", instruction);
    section(&mut out, "Input", input.trim_end());
    out.push_str("### Response:\n");
    out
}

const NEXT_ITEM_INSTRUCTION: &str = "Given the user index and the user's interaction history, \
choose the candidate the user is most likely to interact with next. Answer with the letter of \
one candidate.";
const INDEX_TO_PREF_INSTRUCTION: &str =
    "Describe the preferences of the user identified by the following index.";
const PREF_TO_INDEX_INSTRUCTION: &str =
    "Give the index of the user whose preferences are described below.";
const HISTORY_TO_INDEX_INSTRUCTION: &str =
    "Give the index of the user who interacted with the following items.";
const RATING_INSTRUCTION: &str = "Given the user index, the user's preferences and the ratings \
the user gave to past items, predict the rating of the last item. Answer with a number from 1 to 5.";
const INTENT_INSTRUCTION: &str = "Given the user's stated preferences, choose the candidate the \
user most likely wants. Answer with the letter of one candidate.";

/// Next-item ranking prompt without a response; also used at inference.
pub fn next_item_input<S: AsRef<str>>(
    rendered_id: &str,
    history: &[S],
    candidates: &[S],
) -> String {
    let body = format!(
        "User: {rendered_id}\n{}{}",
        history_block(history),
        candidate_block(candidates)
    );
    finish(NEXT_ITEM_INSTRUCTION, &body)
}

fn check_candidates<S>(candidates: &[S], gt_position: Option<usize>) -> Result<usize, SkipReason> {
    match gt_position {
        Some(p) if p < candidates.len() => Ok(p),
        _ => Err(SkipReason::GroundTruthNotRetrieved),
    }
}

pub fn build_next_item<S: AsRef<str>>(
    user_id: &str,
    rendered_id: &str,
    history: &[S],
    candidates: &[S],
    gt_position: Option<usize>,
) -> Result<PromptInstance, SkipReason> {
    if history.is_empty() {
        return Err(SkipReason::EmptyHistory);
    }
    let gt = check_candidates(candidates, gt_position)?;
    Ok(PromptInstance::new(
        TaskKind::NextItem,
        user_id,
        next_item_input(rendered_id, history, candidates),
        index_letter(gt),
    ))
}

pub fn build_index_to_pref(
    user_id: &str,
    rendered_id: &str,
    summary: Option<&PreferenceSummary>,
) -> Result<PromptInstance, SkipReason> {
    let summary = summary.ok_or(SkipReason::MissingSummary)?;
    let input = finish(INDEX_TO_PREF_INSTRUCTION, &format!("User: {rendered_id}"));
    Ok(PromptInstance::new(
        TaskKind::IndexToPref,
        user_id,
        input,
        summary.text.clone(),
    ))
}

pub fn build_pref_to_index(
    user_id: &str,
    rendered_id: &str,
    summary: Option<&PreferenceSummary>,
) -> Result<PromptInstance, SkipReason> {
    let summary = summary.ok_or(SkipReason::MissingSummary)?;
    let input = finish(
        PREF_TO_INDEX_INSTRUCTION,
        &format!("Preferences: {}", summary.text),
    );
    Ok(PromptInstance::new(
        TaskKind::PrefToIndex,
        user_id,
        input,
        rendered_id.to_string(),
    ))
}

pub fn build_history_to_index<S: AsRef<str>>(
    user_id: &str,
    rendered_id: &str,
    history: &[S],
) -> Result<PromptInstance, SkipReason> {
    if history.is_empty() {
        return Err(SkipReason::EmptyHistory);
    }
    let input = finish(HISTORY_TO_INDEX_INSTRUCTION, &history_block(history));
    Ok(PromptInstance::new(
        TaskKind::HistoryToIndex,
        user_id,
        input,
        rendered_id.to_string(),
    ))
}

/// One titled history entry; `rating` is 0 when the user gave none.
#[derive(Debug, Clone, PartialEq)]
pub struct RatedItem {
    pub title: String,
    pub rating: f64,
}

fn rated(r: f64) -> bool {
    (1.0..=5.0).contains(&r)
}

pub fn build_rating_pred(
    user_id: &str,
    rendered_id: &str,
    summary: Option<&PreferenceSummary>,
    history: &[RatedItem],
) -> Result<PromptInstance, SkipReason> {
    let shown = recent(history);
    let (last, earlier) = shown.split_last().ok_or(SkipReason::EmptyHistory)?;
    if !rated(last.rating) {
        return Err(SkipReason::MissingRating);
    }
    let mut body = format!("User: {rendered_id}\n");
    if let Some(s) = summary {
        let _ = writeln!(body, "Preferences: {}", s.text);
    }
    body.push_str("Ratings (oldest first):\n");
    for (n, item) in earlier.iter().enumerate() {
        let score = if rated(item.rating) {
            render_rating(item.rating)
        } else {
            "not rated".to_string()
        };
        let _ = writeln!(body, "{}. {} -> {score}", n + 1, item.title);
    }
    let _ = writeln!(body, "{}. {} -> ?", earlier.len() + 1, last.title);
    Ok(PromptInstance::new(
        TaskKind::RatingPred,
        user_id,
        finish(RATING_INSTRUCTION, &body),
        render_rating(last.rating),
    ))
}

pub fn build_intent_item<S: AsRef<str>>(
    user_id: &str,
    summary: Option<&PreferenceSummary>,
    candidates: &[S],
    gt_position: Option<usize>,
) -> Result<PromptInstance, SkipReason> {
    let summary = summary.ok_or(SkipReason::MissingSummary)?;
    let gt = check_candidates(candidates, gt_position)?;
    let body = format!(
        "Preferences: {}\n{}",
        summary.text,
        candidate_block(candidates)
    );
    Ok(PromptInstance::new(
        TaskKind::IntentItem,
        user_id,
        finish(INTENT_INSTRUCTION, &body),
        index_letter(gt),
    ))
}

/// Titled candidate pool for one next-item instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub history: Vec<String>,
    pub candidates: Vec<String>,
    /// Position of the ground truth, if the retriever surfaced it.
    pub gt_position: Option<usize>,
}

/// Everything the six builders need for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContext {
    pub user_id: String,
    pub rendered_id: String,
    /// Training history, chronological.
    pub history: Vec<RatedItem>,
    pub summary: Option<PreferenceSummary>,
    pub candidate_sets: Vec<CandidateSet>,
}

/// Instances per task, plus skip counts per (task, reason).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskCorpora {
    pub instances: BTreeMap<TaskKind, Vec<PromptInstance>>,
    pub skipped: BTreeMap<(TaskKind, SkipReason), usize>,
}

impl TaskCorpora {
    fn push(&mut self, task: TaskKind, built: Result<PromptInstance, SkipReason>) {
        match built {
            Ok(i) => self.instances.entry(task).or_default().push(i),
            Err(reason) => *self.skipped.entry((task, reason)).or_default() += 1,
        }
    }

    pub fn count(&self, task: TaskKind) -> usize {
        self.instances.get(&task).map_or(0, Vec::len)
    }

    pub fn skipped_total(&self, task: TaskKind) -> usize {
        self.skipped
            .iter()
            .filter(|((t, _), _)| *t == task)
            .map(|(_, n)| n)
            .sum()
    }
}

/// Run every builder over every user.
pub fn build_corpora(users: &[UserContext]) -> TaskCorpora {
    let mut out = TaskCorpora::default();
    for task in TaskKind::ALL {
        out.instances.entry(task).or_default();
    }
    for u in users {
        let summary = u.summary.as_ref();
        let titles: Vec<&str> = u.history.iter().map(|h| h.title.as_str()).collect();
        for set in &u.candidate_sets {
            out.push(
                TaskKind::NextItem,
                build_next_item(
                    &u.user_id,
                    &u.rendered_id,
                    &set.history,
                    &set.candidates,
                    set.gt_position,
                ),
            );
            out.push(
                TaskKind::IntentItem,
                build_intent_item(&u.user_id, summary, &set.candidates, set.gt_position),
            );
        }
        out.push(
            TaskKind::IndexToPref,
            build_index_to_pref(&u.user_id, &u.rendered_id, summary),
        );
        out.push(
            TaskKind::PrefToIndex,
            build_pref_to_index(&u.user_id, &u.rendered_id, summary),
        );
        out.push(
            TaskKind::HistoryToIndex,
            build_history_to_index(&u.user_id, &u.rendered_id, &titles),
        );
        out.push(
            TaskKind::RatingPred,
            build_rating_pred(&u.user_id, &u.rendered_id, summary, &u.history),
        );
    }
    out
}

pub fn write_corpus_jsonl<W: Write>(corpus: &[PromptInstance], mut out: W) -> std::io::Result<()> {
    for inst in corpus {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus_jsonl<R: BufRead>(input: R) -> Result<Vec<PromptInstance>> {
    input
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.is_empty()))
        .map(|(n, line)| {
            let line = line.map_err(|e| Error::io("<corpus>", e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("corpus line {}: {e}", n + 1)))
        })
        .collect()
}
