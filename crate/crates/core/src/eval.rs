//! Ranking metrics over leave-one-out results.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank::RankingResult;

pub const DEFAULT_KS: [usize; 2] = [5, 10];
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UserMetric {
    pub mrr: f64,
    pub ndcg: f64,
    pub recall: f64,
}

/// Metrics for a single relevant item at 1-based `rank`.
pub fn user_metric(rank: Option<usize>, k: usize) -> Result<UserMetric> {
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be at least 1".into()));
    }
    match rank {
        Some(0) => Err(Error::data("rank must be at least 1")),
        Some(r) if r <= k => Ok(UserMetric {
            mrr: 1.0 / r as f64,
            ndcg: 1.0 / ((r + 1) as f64).log2(),
            recall: 1.0,
        }),
        _ => Ok(UserMetric::default()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "M")]
    Mrr,
    #[serde(rename = "N")]
    Ndcg,
    #[serde(rename = "R")]
    Recall,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Mrr, MetricKind::Ndcg, MetricKind::Recall];

    pub fn letter(&self) -> char {
        match self {
            MetricKind::Mrr => 'M',
            MetricKind::Ndcg => 'N',
            MetricKind::Recall => 'R',
        }
    }

    fn pick(&self, m: &UserMetric) -> f64 {
        match self {
            MetricKind::Mrr => m.mrr,
            MetricKind::Ndcg => m.ndcg,
            MetricKind::Recall => m.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub k: usize,
    pub rank_value: f64,
    pub overall_value: f64,
}

impl MetricValue {
    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.letter(), self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Ordered by k, then M, N, R.
    pub metrics: Vec<MetricValue>,
    pub n_users_total: usize,
    pub n_users_hit: usize,
    /// No user had the ground truth among the candidates.
    pub no_hits: bool,
}

impl MetricsReport {
    pub fn get(&self, kind: MetricKind, k: usize) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.kind == kind && m.k == k)
    }

    pub fn hit_rate(&self) -> f64 {
        self.n_users_hit as f64 / self.n_users_total as f64
    }

    /// Two blocks of columns, rank view then overall view.
    pub fn table(&self) -> String {
        format_comparison(&[("", self)])
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            metric: &'a str,
            view: &'a str,
            value: f64,
        }
        for m in &self.metrics {
            let label = m.label();
            for (view, value) in [("rank", m.rank_value), ("overall", m.overall_value)] {
                serde_json::to_writer(
                    &mut out,
                    &Record {
                        metric: &label,
                        view,
                        value,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
        writeln!(
            out,
            "{}",
            serde_json::json!({"n_users_total": self.n_users_total, "n_users_hit": self.n_users_hit})
        )
    }
}

/// Aligned grid: a rank block and an overall block, one row per labelled
/// report. A single unlabelled report gets one row per view.
pub fn format_comparison(rows: &[(&str, &MetricsReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let single = rows.len() == 1 && rows[0].0.is_empty();
    let width = rows
        .iter()
        .map(|(l, _)| l.len() + 2)
        .max()
        .unwrap_or(0)
        .max(7);
    let mut out = format!("{:<width$}", "");
    for m in &first.metrics {
        let _ = write!(out, " {:>7}", m.label());
    }
    out.push('\n');
    let views: [(&str, fn(&MetricValue) -> f64); 2] =
        [("Rank", |m| m.rank_value), ("Overall", |m| m.overall_value)];
    for (view, pick) in views {
        if !single {
            let _ = writeln!(out, "{view}");
        }
        for (label, report) in rows {
            let name = if single {
                view.to_string()
            } else {
                format!("  {label}")
            };
            let _ = write!(out, "{name:<width$}");
            for m in &report.metrics {
                let _ = write!(out, " {:>7.4}", pick(m));
            }
            out.push('\n');
        }
    }
    for (label, report) in rows {
        let prefix = if label.is_empty() {
            String::new()
        } else {
            format!("{label}: ")
        };
        let _ = writeln!(
            out,
            "{prefix}users {} hit {} ({:.4})",
            report.n_users_total,
            report.n_users_hit,
            report.hit_rate()
        );
    }
    out
}

fn check_result(r: &RankingResult) -> Result<()> {
    match (r.gt_in_candidates, r.gt_rank) {
        (true, Some(rank)) if rank >= 1 => Ok(()),
        (false, None) => Ok(()),
        _ => Err(Error::data(format!(
            "inconsistent ranking result for user {}",
            r.user_id
        ))),
    }
}

pub fn aggregate(results: &[RankingResult], ks: &[usize]) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::data("no ranking results to evaluate"));
    }
    if ks.is_empty() {
        return Err(Error::Config("no metric cutoffs given".into()));
    }
    for r in results {
        check_result(r)?;
    }
    let n_total = results.len();
    let n_hit = results.iter().filter(|r| r.gt_in_candidates).count();
    let mut metrics = Vec::new();
    for &k in ks {
        let mut sums = UserMetric::default();
        for r in results.iter().filter(|r| r.gt_in_candidates) {
            let m = user_metric(r.gt_rank, k)?;
            sums.mrr += m.mrr;
            sums.ndcg += m.ndcg;
            sums.recall += m.recall;
        }
        for kind in MetricKind::ALL {
            let sum = kind.pick(&sums);
            metrics.push(MetricValue {
                kind,
                k,
                rank_value: if n_hit == 0 { 0.0 } else { sum / n_hit as f64 },
                overall_value: sum / n_total as f64,
            });
        }
    }
    Ok(MetricsReport {
        metrics,
        n_users_total: n_total,
        n_users_hit: n_hit,
        no_hits: n_hit == 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub metric: String,
    pub view: &'static str,
    pub expected: f64,
    pub found: f64,
}

/// Recompute every value in `report` from `results` by brute force and list
/// the ones that disagree by more than [`ORACLE_TOLERANCE`].
pub fn oracle_check(results: &[RankingResult], report: &MetricsReport) -> Vec<Discrepancy> {
    let mut found = Vec::new();
    let mut hits = 0usize;
    for r in results {
        if r.gt_rank.is_some() {
            hits += 1;
        }
    }
    let mut push = |metric: String, view: &'static str, expected: f64, got: f64| {
        if !((expected - got).abs() <= ORACLE_TOLERANCE) {
            found.push(Discrepancy {
                metric,
                view,
                expected,
                found: got,
            });
        }
    };
    if hits != report.n_users_hit {
        push(
            "n_users_hit".into(),
            "count",
            hits as f64,
            report.n_users_hit as f64,
        );
    }
    if results.len() != report.n_users_total {
        push(
            "n_users_total".into(),
            "count",
            results.len() as f64,
            report.n_users_total as f64,
        );
    }
    for m in &report.metrics {
        let mut total = 0.0;
        for r in results {
            let Some(rank) = r.gt_rank else { continue };
            // walk the list position by position
            let mut gain = 0.0;
            for pos in 1..=m.k {
                if pos == rank {
                    gain = match m.kind {
                        MetricKind::Mrr => 1.0 / pos as f64,
                        MetricKind::Ndcg => std::f64::consts::LN_2 / (pos as f64 + 1.0).ln(),
                        MetricKind::Recall => 1.0,
                    };
                }
            }
            total += gain;
        }
        let rank_view = if hits == 0 { 0.0 } else { total / hits as f64 };
        let overall = if results.is_empty() {
            0.0
        } else {
            total / results.len() as f64
        };
        push(m.label(), "rank", rank_view, m.rank_value);
        push(m.label(), "overall", overall, m.overall_value);
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(user: &str, rank: Option<usize>) -> RankingResult {
        RankingResult {
            user_id: user.into(),
            ordered: vec![],
            gt_in_candidates: rank.is_some(),
            gt_rank: rank,
        }
    }

    #[test]
    fn single_user_cases() {
        let m = user_metric(Some(1), 5).unwrap();
        assert_eq!((m.mrr, m.ndcg, m.recall), (1.0, 1.0, 1.0));
        let m = user_metric(Some(3), 5).unwrap();
        assert_eq!(m.mrr, 1.0 / 3.0);
        assert_eq!(m.ndcg, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(user_metric(Some(7), 5).unwrap(), UserMetric::default());
        assert_eq!(user_metric(None, 5).unwrap(), UserMetric::default());
        assert!(user_metric(Some(0), 5).is_err());
        assert!(user_metric(Some(1), 0).is_err());
    }

    #[test]
    fn two_hits() {
        let r = aggregate(&[result("a", Some(1)), result("b", Some(2))], &DEFAULT_KS).unwrap();
        assert_eq!(r.get(MetricKind::Mrr, 5).unwrap().rank_value, 0.75);
        assert!(oracle_check(&[result("a", Some(1)), result("b", Some(2))], &r).is_empty());
    }

    #[test]
    fn one_hit_one_miss() {
        let rs = [result("a", Some(1)), result("b", None)];
        let r = aggregate(&rs, &DEFAULT_KS).unwrap();
        let r5 = r.get(MetricKind::Recall, 5).unwrap();
        assert_eq!(r5.rank_value, 1.0);
        assert_eq!(r5.overall_value, 0.5);
        assert_eq!(r.hit_rate(), 0.5);
    }

    #[test]
    fn all_misses_are_flagged() {
        let r = aggregate(&[result("a", None), result("b", None)], &DEFAULT_KS).unwrap();
        assert!(r.no_hits);
        assert!(r
            .metrics
            .iter()
            .all(|m| m.rank_value == 0.0 && m.overall_value == 0.0));
    }

    #[test]
    fn inconsistent_inputs_are_rejected() {
        assert!(aggregate(&[], &DEFAULT_KS).is_err());
        let bad = RankingResult {
            gt_in_candidates: true,
            ..result("a", None)
        };
        assert!(aggregate(&[bad], &DEFAULT_KS).is_err());
        assert!(aggregate(&[result("a", Some(0))], &DEFAULT_KS).is_err());
    }

    #[test]
    fn improving_a_rank_never_hurts() {
        let base = [
            result("a", Some(4)),
            result("b", Some(9)),
            result("c", None),
        ];
        let before = aggregate(&base, &DEFAULT_KS).unwrap();
        for (i, better) in [(0, Some(1)), (1, Some(3)), (2, Some(12)), (2, Some(2))] {
            let mut changed = base.clone();
            changed[i] = result(&changed[i].user_id.clone(), better);
            let after = aggregate(&changed, &DEFAULT_KS).unwrap();
            for (b, a) in before.metrics.iter().zip(&after.metrics) {
                assert!(a.overall_value >= b.overall_value);
            }
        }
    }

    #[test]
    fn single_rank_one_user_passes_oracle() {
        let rs = [result("a", Some(1))];
        assert!(oracle_check(&rs, &aggregate(&rs, &DEFAULT_KS).unwrap()).is_empty());
    }

    #[test]
    fn injected_fault_is_reported_once() {
        let rs = [
            result("a", Some(2)),
            result("b", Some(6)),
            result("c", None),
        ];
        let mut report = aggregate(&rs, &DEFAULT_KS).unwrap();
        report.metrics[1].overall_value += 1.0 / 3.0;
        let d = oracle_check(&rs, &report);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].metric, "N@5");
        assert_eq!(d[0].view, "overall");
    }

    #[test]
    fn table_and_records() {
        let r = aggregate(&[result("a", Some(3)), result("b", None)], &DEFAULT_KS).unwrap();
        let t = r.table();
        assert!(t.contains("M@5") && t.contains("R@10") && t.contains("Overall"));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].len(), lines[1].len());
        assert!(lines[1].starts_with("Rank") && lines[2].starts_with("Overall"));
        let grid = format_comparison(&[("P-ID", &r), ("N-ID", &r)]);
        assert_eq!(grid.lines().count(), 1 + 2 * 3 + 2);
        assert!(grid.contains("  N-ID"));
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.contains(r#"{"metric":"N@5","view":"rank","value":0.5}"#));
    }
}
