use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptInstance, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub proportions: BTreeMap<TaskKind, f64>,
    pub total: usize,
    pub seed: u64,
}

impl MixtureConfig {
    pub fn uniform(total: usize, seed: u64) -> Self {
        MixtureConfig {
            proportions: TaskKind::ALL.iter().map(|&t| (t, 1.0 / 6.0)).collect(),
            total,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .proportions
            .values()
            .any(|p| !(p.is_finite() && *p >= 0.0))
        {
            return Err(Error::Config(
                "mixture proportions must be non-negative".into(),
            ));
        }
        let sum: f64 = self.proportions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture proportions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub requested: BTreeMap<TaskKind, usize>,
    pub taken: BTreeMap<TaskKind, usize>,
}

/// Largest-remainder apportionment of `total` over the proportions. Equal
/// remainders go to the task whose name sorts first.
pub fn allocate(proportions: &BTreeMap<TaskKind, f64>, total: usize) -> BTreeMap<TaskKind, usize> {
    let mut counts = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut assigned = 0;
    for (&task, &p) in proportions {
        let exact = total as f64 * p;
        let floor = exact.floor() as usize;
        counts.insert(task, floor);
        assigned += floor;
        remainders.push((exact - floor as f64, task));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.name().cmp(b.1.name())));
    for (_, task) in remainders.into_iter().take(total.saturating_sub(assigned)) {
        *counts.get_mut(&task).expect("task present") += 1;
    }
    counts
}

/// Sample each task's share without replacement, then shuffle everything.
pub fn mix(
    instances: &BTreeMap<TaskKind, Vec<PromptInstance>>,
    config: &MixtureConfig,
) -> Result<(Vec<PromptInstance>, MixReport)> {
    config.validate()?;
    let requested = allocate(&config.proportions, config.total);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = MixReport {
        requested: requested.clone(),
        taken: BTreeMap::new(),
    };
    let mut out = Vec::with_capacity(config.total);
    for (&task, &want) in &requested {
        let mut pool: Vec<&PromptInstance> = instances
            .get(&task)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        pool.sort_by(|a, b| {
            (&a.user_id, &a.input, &a.target).cmp(&(&b.user_id, &b.input, &b.target))
        });
        pool.shuffle(&mut rng);
        if pool.len() < want {
            warn!(
                "task {task}: requested {want} instances but only {} available",
                pool.len()
            );
        }
        let take = want.min(pool.len());
        out.extend(pool.into_iter().take(take).cloned());
        report.taken.insert(task, take);
    }
    out.shuffle(&mut rng);
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(task: TaskKind, n: usize) -> Vec<PromptInstance> {
        (0..n)
            .map(|i| PromptInstance {
                task,
                user_id: format!("u{i:03}"),
                input: format!("input {i}"),
                target: "A".into(),
                response_offset: 7,
            })
            .collect()
    }

    #[test]
    fn uniform_six_way_split() {
        let counts = allocate(&MixtureConfig::uniform(600, 0).proportions, 600);
        assert!(counts.values().all(|&c| c == 100));
    }

    #[test]
    fn largest_remainder_tie_goes_to_first_name() {
        let proportions = [(TaskKind::NextItem, 0.5), (TaskKind::RatingPred, 0.5)]
            .into_iter()
            .collect();
        let counts = allocate(&proportions, 7);
        // "next_item" < "rating_pred"
        assert_eq!(counts[&TaskKind::NextItem], 4);
        assert_eq!(counts[&TaskKind::RatingPred], 3);
    }

    #[test]
    fn allocation_sums_to_total() {
        let proportions = [
            (TaskKind::NextItem, 0.37),
            (TaskKind::IntentItem, 0.21),
            (TaskKind::HistoryToIndex, 0.42),
        ]
        .into_iter()
        .collect();
        for total in [0, 1, 7, 99, 1000] {
            assert_eq!(allocate(&proportions, total).values().sum::<usize>(), total);
        }
    }

    #[test]
    fn mix_is_seeded_and_exact() {
        let pools: BTreeMap<_, _> = TaskKind::ALL.iter().map(|&t| (t, inst(t, 150))).collect();
        let config = MixtureConfig::uniform(600, 42);
        let (a, report) = mix(&pools, &config).unwrap();
        let (b, _) = mix(&pools, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 600);
        for t in TaskKind::ALL {
            assert_eq!(a.iter().filter(|i| i.task == t).count(), 100);
            assert_eq!(report.taken[&t], 100);
        }
        let mut keys: Vec<_> = a.iter().map(|i| (i.task, i.user_id.clone())).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 600, "sampling is without replacement");
        let (c, _) = mix(&pools, &MixtureConfig::uniform(600, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn short_pools_are_truncated() {
        let pools: BTreeMap<_, _> = [(TaskKind::NextItem, inst(TaskKind::NextItem, 3))]
            .into_iter()
            .collect();
        let config = MixtureConfig {
            proportions: [(TaskKind::NextItem, 1.0)].into_iter().collect(),
            total: 10,
            seed: 0,
        };
        let (out, report) = mix(&pools, &config).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(report.requested[&TaskKind::NextItem], 10);
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let config = MixtureConfig {
            proportions: [(TaskKind::NextItem, 0.5)].into_iter().collect(),
            total: 10,
            seed: 0,
        };
        assert!(mix(&BTreeMap::new(), &config).is_err());
    }
}
