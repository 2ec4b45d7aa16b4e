use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embed::tokenize;
use crate::error::Result;

/// Summary text used when a user wrote nothing usable.
pub const NO_PREFERENCES: &str = "no stated preferences";

pub const DEFAULT_TERMS: usize = 12;

pub const STOPWORDS: &[&str] = &[
    "a", "about", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "but", "by", "can", "could", "did", "do", "does",
    "doing", "don", "for", "from", "get", "got", "had", "has", "have", "having", "he", "her",
    "here", "hers", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself",
    "just", "me", "more", "most", "my", "no", "nor", "not", "now", "of", "off", "on", "once",
    "one", "only", "or", "other", "our", "out", "over", "own", "really", "same", "she", "so",
    "some", "such", "than", "that", "the", "their", "them", "then", "there", "these", "they",
    "this", "those", "through", "to", "too", "under", "until", "up", "use", "used", "very", "was",
    "we", "were", "what", "when", "where", "which", "while", "who", "why", "will", "with", "would",
    "you", "your",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub user_id: String,
    pub text: String,
}

/// Turns a user's reviews into a short preference description.
pub trait Summarizer {
    fn summarize(&self, user_id: &str, reviews: &[String]) -> Result<PreferenceSummary>;
}

/// Most frequent content words across a user's reviews.
#[derive(Debug, Clone)]
pub struct ExtractiveSummarizer {
    terms: usize,
    stopwords: HashSet<&'static str>,
}

impl Default for ExtractiveSummarizer {
    fn default() -> Self {
        Self::new(DEFAULT_TERMS)
    }
}

impl ExtractiveSummarizer {
    pub fn new(terms: usize) -> Self {
        ExtractiveSummarizer {
            terms,
            stopwords: STOPWORDS.iter().copied().collect(),
        }
    }

    /// Content tokens ranked by frequency; ties keep first-occurrence order.
    pub fn top_terms(&self, reviews: &[String]) -> Vec<String> {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut next = 0;
        for token in reviews.iter().flat_map(|r| tokenize(r)) {
            if token.chars().count() < 2
                || token.chars().all(|c| c.is_ascii_digit())
                || self.stopwords.contains(token.as_str())
            {
                continue;
            }
            let entry = counts.entry(token).or_insert_with(|| {
                next += 1;
                (0, next)
            });
            entry.0 += 1;
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked
            .into_iter()
            .take(self.terms)
            .map(|(t, _)| t)
            .collect()
    }
}

impl Summarizer for ExtractiveSummarizer {
    fn summarize(&self, user_id: &str, reviews: &[String]) -> Result<PreferenceSummary> {
        let terms = self.top_terms(reviews);
        let text = if terms.is_empty() {
            NO_PREFERENCES.to_string()
        } else {
            terms.join(", ")
        };
        Ok(PreferenceSummary {
            user_id: user_id.to_string(),
            text,
        })
    }
}
