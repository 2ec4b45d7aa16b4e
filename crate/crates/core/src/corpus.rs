//! Review ingestion, k-core filtering and leave-one-out splitting.
//!
//! Raw input is line-delimited JSON in the Amazon review layout
//! (`reviewerID`, `asin`, `overall`, `unixReviewTime`, `reviewText`) plus a
//! metadata stream of `asin`/`title` rows. Canonical field names are accepted
//! as aliases so re-ingesting our own `interactions.jsonl` works too.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// 0 means "no rating given".
    pub rating: f64,
    pub timestamp: i64,
    pub review_text: String,
}

impl Interaction {
    pub fn has_rating(&self) -> bool {
        (1.0..=5.0).contains(&self.rating)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
}

/// Item id → title. Only titled items are ever present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    items: BTreeMap<String, String>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item_id: String, title: String) {
        self.items.entry(item_id).or_insert(title);
    }

    pub fn title(&self, item_id: &str) -> Option<&str> {
        self.items.get(item_id).map(String::as_str)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.items.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Keep only the listed items.
    pub fn retain(&mut self, keep: &HashSet<String>) {
        self.items.retain(|k, _| keep.contains(k));
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, title) in &self.items {
            writeln!(out, "{id}\t{title}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut catalog = Catalog::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<catalog>", e))?;
            if line.is_empty() {
                continue;
            }
            let (id, title) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("catalog line {}: missing tab", n + 1)))?;
            catalog.insert(id.to_string(), title.to_string());
        }
        Ok(catalog)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    /// Ascending by timestamp; ties keep input order.
    pub interactions: Vec<Interaction>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.interactions.iter().map(|i| i.item_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<Interaction>,
    pub valid: Interaction,
    pub test: Interaction,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSet {
    /// Sorted by user id.
    pub users: Vec<UserSplit>,
    /// Users whose sequence was too short to split.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub malformed_reviews: usize,
    pub malformed_metadata: usize,
    pub untitled_dropped: usize,
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(alias = "user_id")]
    #[serde(rename = "reviewerID")]
    user_id: String,
    #[serde(alias = "item_id")]
    #[serde(rename = "asin")]
    item_id: String,
    #[serde(alias = "rating")]
    #[serde(rename = "overall")]
    rating: Option<f64>,
    #[serde(alias = "timestamp")]
    #[serde(rename = "unixReviewTime")]
    timestamp: i64,
    #[serde(alias = "review_text")]
    #[serde(rename = "reviewText")]
    review_text: Option<String>,
}

#[derive(Deserialize)]
struct RawMeta {
    #[serde(alias = "item_id")]
    #[serde(rename = "asin")]
    item_id: String,
    title: Option<String>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['\t', '\n', '\r', ',', ':', ' '])
}

fn clean_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_review(line: &str) -> Option<Interaction> {
    let raw: RawReview = serde_json::from_str(line).ok()?;
    let rating = raw.rating.unwrap_or(0.0);
    if !valid_id(&raw.user_id) || !valid_id(&raw.item_id) || raw.timestamp < 0 {
        return None;
    }
    if rating != 0.0 && !(1.0..=5.0).contains(&rating) {
        return None;
    }
    Some(Interaction {
        user_id: raw.user_id,
        item_id: raw.item_id,
        rating,
        timestamp: raw.timestamp,
        review_text: clean_text(raw.review_text.as_deref().unwrap_or("")),
    })
}

/// Read both streams and build chronological per-user sequences.
///
/// Malformed lines are skipped and counted. Reviews of items without a
/// title row are dropped. Fails if no user survives.
pub fn ingest<R1: BufRead, R2: BufRead>(
    reviews: R1,
    metadata: R2,
) -> Result<(Vec<UserSequence>, Catalog, IngestReport)> {
    let mut report = IngestReport::default();
    let mut catalog = Catalog::new();
    for line in metadata.lines() {
        let line = line.map_err(|e| Error::io("<metadata>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawMeta>(&line) {
            Ok(meta) if valid_id(&meta.item_id) => {
                let title = clean_text(meta.title.as_deref().unwrap_or(""));
                if !title.is_empty() {
                    catalog.insert(meta.item_id, title);
                }
            }
            _ => report.malformed_metadata += 1,
        }
    }

    let mut by_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for line in reviews.lines() {
        let line = line.map_err(|e| Error::io("<reviews>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(interaction) = parse_review(&line) else {
            report.malformed_reviews += 1;
            continue;
        };
        if !catalog.contains(&interaction.item_id) {
            report.untitled_dropped += 1;
            continue;
        }
        by_user
            .entry(interaction.user_id.clone())
            .or_default()
            .push(interaction);
    }

    if report.malformed_reviews + report.malformed_metadata > 0 {
        warn!(
            "skipped {} malformed review lines and {} malformed metadata lines",
            report.malformed_reviews, report.malformed_metadata
        );
    }
    if report.untitled_dropped > 0 {
        warn!(
            "dropped {} interactions with items lacking titles",
            report.untitled_dropped
        );
    }
    if by_user.is_empty() {
        return Err(Error::data("no users survived ingestion"));
    }

    let sequences = by_user
        .into_iter()
        .map(|(user_id, mut interactions)| {
            interactions.sort_by_key(|i| i.timestamp);
            UserSequence {
                user_id,
                interactions,
            }
        })
        .collect();
    Ok((sequences, catalog, report))
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// nothing changes.
pub fn kcore_filter(sequences: Vec<UserSequence>, k: usize) -> Result<Vec<UserSequence>> {
    if k == 0 {
        return Err(Error::Config("k-core threshold must be at least 1".into()));
    }
    let mut sequences = sequences;
    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for seq in &sequences {
            for item in seq.item_ids() {
                *item_counts.entry(item).or_default() += 1;
            }
        }
        let weak_items: HashSet<String> = item_counts
            .into_iter()
            .filter(|&(_, c)| c < k)
            .map(|(i, _)| i.to_string())
            .collect();
        let weak_users = sequences.iter().any(|s| s.len() < k);
        if weak_items.is_empty() && !weak_users {
            break;
        }
        sequences = sequences
            .into_iter()
            .filter(|s| s.len() >= k)
            .map(|mut s| {
                s.interactions.retain(|i| !weak_items.contains(&i.item_id));
                s
            })
            .collect();
    }
    if sequences.is_empty() {
        return Err(Error::data(format!("no users survive {k}-core filtering")));
    }
    Ok(sequences)
}

/// Last item for test, second-to-last for validation, the rest for training.
pub fn split_leave_one_out(sequences: &[UserSequence]) -> SplitSet {
    let mut split = SplitSet::default();
    for seq in sequences {
        let n = seq.len();
        if n < 3 {
            warn!(
                "user {} has {n} interactions; excluded from split",
                seq.user_id
            );
            split.excluded.push(seq.user_id.clone());
            continue;
        }
        split.users.push(UserSplit {
            user_id: seq.user_id.clone(),
            train: seq.interactions[..n - 2].to_vec(),
            valid: seq.interactions[n - 2].clone(),
            test: seq.interactions[n - 1].clone(),
        });
    }
    split.users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    split
}

/// One user per line: `user_id TAB item:timestamp:rating,...`.
pub fn write_sequences_tsv<W: Write>(
    sequences: &[UserSequence],
    mut out: W,
) -> std::io::Result<()> {
    for seq in sequences {
        let items: Vec<String> = seq
            .interactions
            .iter()
            .map(|i| format!("{}:{}:{}", i.item_id, i.timestamp, i.rating))
            .collect();
        writeln!(out, "{}\t{}", seq.user_id, items.join(","))?;
    }
    Ok(())
}

/// Canonical line-delimited interaction records, in sequence order.
pub fn write_interactions_jsonl<W: Write>(
    sequences: &[UserSequence],
    mut out: W,
) -> std::io::Result<()> {
    for seq in sequences {
        for i in &seq.interactions {
            serde_json::to_writer(&mut out, i)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Rebuild sequences from `write_interactions_jsonl` output.
pub fn read_interactions_jsonl<R: BufRead>(input: R) -> Result<Vec<UserSequence>> {
    let mut by_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<interactions>", e))?;
        if line.is_empty() {
            continue;
        }
        let i: Interaction = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("interactions line {}: {e}", n + 1)))?;
        by_user.entry(i.user_id.clone()).or_default().push(i);
    }
    Ok(by_user
        .into_iter()
        .map(|(user_id, interactions)| UserSequence {
            user_id,
            interactions,
        })
        .collect())
}
