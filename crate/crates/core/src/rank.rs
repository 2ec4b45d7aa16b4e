//! Candidate retrieval and letter-based re-ranking.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::tokenize;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 20;
pub const COOC_DECAY: f64 = 0.9;
pub const POPULARITY_WEIGHT: f64 = 0.01;

pub trait Retriever: Send + Sync {
    fn name(&self) -> &str;

    /// Up to `top_k` distinct items for a user whose chronological history is given.
    fn retrieve(&self, user_id: &str, history: &[String], top_k: usize) -> Result<Vec<String>>;
}

/// Scores items by how often they directly followed the user's recent
/// items in training sequences, plus a small popularity prior.
#[derive(Debug, Clone, Default)]
pub struct CoocRetriever {
    follows: HashMap<String, HashMap<String, f64>>,
    /// Interaction counts scaled so the most popular item has 1.
    popularity: BTreeMap<String, f64>,
    decay: f64,
    lambda: f64,
}

impl CoocRetriever {
    /// `sequences` are training-split item sequences; `catalog` lists every
    /// retrievable item.
    pub fn fit<'a, S, I>(sequences: S, catalog: I) -> Self
    where
        S: IntoIterator<Item = &'a [String]>,
        I: IntoIterator<Item = &'a str>,
    {
        let mut follows: HashMap<String, HashMap<String, f64>> = HashMap::new();
        let mut counts: BTreeMap<String, f64> =
            catalog.into_iter().map(|i| (i.to_string(), 0.0)).collect();
        for seq in sequences {
            for item in seq {
                if let Some(c) = counts.get_mut(item) {
                    *c += 1.0;
                }
            }
            for pair in seq.windows(2) {
                *follows
                    .entry(pair[0].clone())
                    .or_default()
                    .entry(pair[1].clone())
                    .or_default() += 1.0;
            }
        }
        let max = counts.values().copied().fold(0.0, f64::max);
        if max > 0.0 {
            counts.values_mut().for_each(|c| *c /= max);
        }
        CoocRetriever {
            follows,
            popularity: counts,
            decay: COOC_DECAY,
            lambda: POPULARITY_WEIGHT,
        }
    }

    pub fn score(&self, history: &[String], item: &str) -> f64 {
        let mut s = 0.0;
        let mut weight = 1.0;
        for prev in history.iter().rev() {
            if let Some(c) = self.follows.get(prev).and_then(|m| m.get(item)) {
                s += c * weight;
            }
            weight *= self.decay;
        }
        s + self.lambda * self.popularity.get(item).copied().unwrap_or(0.0)
    }
}

impl Retriever for CoocRetriever {
    fn name(&self) -> &str {
        "cooc"
    }

    fn retrieve(&self, user_id: &str, history: &[String], top_k: usize) -> Result<Vec<String>> {
        if history.is_empty() {
            return Err(Error::data(format!("empty history for user {user_id}")));
        }
        let seen: HashSet<&str> = history.iter().map(String::as_str).collect();
        let mut scored: Vec<(f64, &str)> = self
            .popularity
            .keys()
            .filter(|i| !seen.contains(i.as_str()))
            .map(|i| (self.score(history, i), i.as_str()))
            .collect();
        if scored.len() < top_k {
            warn!(
                "only {} retrievable items for user {user_id}, fewer than {top_k}",
                scored.len()
            );
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(top_k)
            .map(|(_, i)| i.to_string())
            .collect())
    }
}

/// Candidates computed elsewhere, one TSV row per user.
#[derive(Debug, Clone, Default)]
pub struct FileRetriever {
    rows: HashMap<String, Vec<String>>,
}

impl FileRetriever {
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let rows = read_keyed_tsv(input, |s| Ok(s.to_string()))?;
        Ok(FileRetriever { rows })
    }
}

impl Retriever for FileRetriever {
    fn name(&self) -> &str {
        "file"
    }

    fn retrieve(&self, user_id: &str, _history: &[String], top_k: usize) -> Result<Vec<String>> {
        let row = self
            .rows
            .get(user_id)
            .ok_or_else(|| Error::MissingKey(user_id.to_string()))?;
        Ok(row.iter().take(top_k).cloned().collect())
    }
}

fn read_keyed_tsv<R: BufRead, T>(
    input: R,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<HashMap<String, Vec<T>>> {
    let mut rows = HashMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (user, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("line {}: expected user<TAB>values", n + 1)))?;
        let values = values
            .split(',')
            .map(|v| parse(v.trim()))
            .collect::<Result<Vec<T>>>()?;
        if rows.insert(user.to_string(), values).is_some() {
            return Err(Error::data(format!(
                "line {}: duplicate user {user}",
                n + 1
            )));
        }
    }
    Ok(rows)
}

pub fn write_candidates_tsv<W: Write>(
    rows: &BTreeMap<String, Vec<String>>,
    mut out: W,
) -> std::io::Result<()> {
    for (user, items) in rows {
        writeln!(out, "{user}\t{}", items.join(","))?;
    }
    Ok(())
}

/// What a scorer sees for one ranking query.
#[derive(Debug, Clone, Copy)]
pub struct ScoringContext<'a> {
    pub user_id: &'a str,
    pub prompt: &'a str,
    pub history: &'a [String],
    /// Candidate titles in letter order.
    pub candidates: &'a [String],
    /// Only the oracle and adversarial scorers look at this.
    pub gt_position: Option<usize>,
}

/// One logit per lettered candidate.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, ctx: &ScoringContext<'_>) -> Result<Vec<f64>>;
}

/// Share of a candidate title's distinct tokens that appear in the history.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapScorer;

impl Scorer for OverlapScorer {
    fn name(&self) -> &str {
        "overlap"
    }

    fn score(&self, ctx: &ScoringContext<'_>) -> Result<Vec<f64>> {
        let seen: HashSet<String> = ctx.history.iter().flat_map(|t| tokenize(t)).collect();
        Ok(ctx
            .candidates
            .iter()
            .map(|title| {
                let tokens: HashSet<String> = tokenize(title).collect();
                if tokens.is_empty() {
                    return 0.0;
                }
                tokens.iter().filter(|t| seen.contains(*t)).count() as f64 / tokens.len() as f64
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, ctx: &ScoringContext<'_>) -> Result<Vec<f64>> {
        Ok((0..ctx.candidates.len())
            .map(|i| if Some(i) == ctx.gt_position { 1.0 } else { 0.0 })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AdversarialScorer;

impl Scorer for AdversarialScorer {
    fn name(&self) -> &str {
        "adversarial"
    }

    fn score(&self, ctx: &ScoringContext<'_>) -> Result<Vec<f64>> {
        Ok((0..ctx.candidates.len())
            .map(|i| {
                if Some(i) == ctx.gt_position {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Uniform random logits, reproducible per (seed, user).
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn score(&self, ctx: &ScoringContext<'_>) -> Result<Vec<f64>> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in ctx.user_id.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ h);
        Ok((0..ctx.candidates.len())
            .map(|_| rng.random::<f64>())
            .collect())
    }
}

/// Precomputed logits, one TSV row per user.
#[derive(Debug, Clone, Default)]
pub struct FileScorer {
    rows: HashMap<String, Vec<f64>>,
}

impl FileScorer {
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let rows = read_keyed_tsv(input, |s| {
            s.parse::<f64>()
                .map_err(|_| Error::data(format!("bad logit {s:?}")))
        })?;
        Ok(FileScorer { rows })
    }
}

impl Scorer for FileScorer {
    fn name(&self) -> &str {
        "file"
    }

    fn score(&self, ctx: &ScoringContext<'_>) -> Result<Vec<f64>> {
        self.rows
            .get(ctx.user_id)
            .cloned()
            .ok_or_else(|| Error::MissingKey(ctx.user_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user_id: String,
    pub ordered: Vec<String>,
    pub gt_in_candidates: bool,
    /// 1-based.
    pub gt_rank: Option<usize>,
}

/// Order candidates by their letter's logit, highest first; equal logits
/// keep letter order.
pub fn verbalize_rank(
    scorer: &dyn Scorer,
    ctx: &ScoringContext<'_>,
    candidate_ids: &[String],
    gt_item: Option<&str>,
) -> Result<RankingResult> {
    if ctx.candidates.len() != candidate_ids.len() {
        return Err(Error::Dimension {
            expected: candidate_ids.len(),
            found: ctx.candidates.len(),
        });
    }
    let logits = scorer.score(ctx)?;
    if logits.len() != candidate_ids.len() {
        return Err(Error::data(format!(
            "scorer {} returned {} logits for {} candidates",
            scorer.name(),
            logits.len(),
            candidate_ids.len()
        )));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::Divergence(format!(
            "scorer {} returned non-finite logit {} for user {}",
            scorer.name(),
            logits[i],
            ctx.user_id
        )));
    }
    Ok(rank_by_logits(ctx.user_id, candidate_ids, &logits, gt_item))
}

pub fn rank_by_logits(
    user_id: &str,
    candidate_ids: &[String],
    logits: &[f64],
    gt_item: Option<&str>,
) -> RankingResult {
    let mut order: Vec<usize> = (0..candidate_ids.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let ordered: Vec<String> = order.iter().map(|&i| candidate_ids[i].clone()).collect();
    let gt_rank = gt_item.and_then(|gt| ordered.iter().position(|i| i == gt).map(|p| p + 1));
    RankingResult {
        user_id: user_id.to_string(),
        ordered,
        gt_in_candidates: gt_rank.is_some(),
        gt_rank,
    }
}

pub fn write_results_jsonl<W: Write>(results: &[RankingResult], mut out: W) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results_jsonl<R: BufRead>(input: R) -> Result<Vec<RankingResult>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Set when some target had zero probability.
    pub divergent: bool,
}

/// Summed negative log-likelihood of `targets` under per-step distributions.
pub fn token_cross_entropy(targets: &[usize], distributions: &[Vec<f64>]) -> Result<CrossEntropy> {
    if targets.len() != distributions.len() {
        return Err(Error::Dimension {
            expected: targets.len(),
            found: distributions.len(),
        });
    }
    let mut value = 0.0;
    for (step, (&t, dist)) in targets.iter().zip(distributions).enumerate() {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || dist.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::data(format!(
                "step {step}: not a probability distribution"
            )));
        }
        let p = *dist
            .get(t)
            .ok_or_else(|| Error::data(format!("step {step}: target {t} out of range")))?;
        if p == 0.0 {
            return Ok(CrossEntropy {
                value: f64::INFINITY,
                divergent: true,
            });
        }
        value -= p.ln();
    }
    Ok(CrossEntropy {
        value: value.max(0.0),
        divergent: false,
    })
}
