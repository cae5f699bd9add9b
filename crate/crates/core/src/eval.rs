//! Leave-one-out evaluation with full-catalog ranking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conformal::split_cp;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::par;
use crate::types::ItemId;

pub const DEFAULT_KS: [usize; 2] = [10, 50];

/// The whole catalog ordered by descending relevance, ties to the lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<ItemId>,
    pub rank_of_truth: Option<usize>,
}

fn masked(mut relevance: Vec<f64>, history: &[ItemId], mask: bool) -> Vec<f64> {
    if mask {
        for it in history {
            relevance[it.index()] = f64::NEG_INFINITY;
        }
    }
    relevance
}

pub fn rank_relevance(relevance: &[f64], truth: Option<ItemId>) -> RankedList {
    let mut items: Vec<ItemId> = (0..relevance.len()).map(ItemId::from).collect();
    items.sort_by(|a, b| {
        relevance[b.index()]
            .total_cmp(&relevance[a.index()])
            .then(a.cmp(b))
    });
    let rank_of_truth = truth.and_then(|t| items.iter().position(|&i| i == t).map(|p| p + 1));
    RankedList {
        items,
        rank_of_truth,
    }
}

pub fn rank_full<S: Scorer + ?Sized>(
    scorer: &S,
    history: &[ItemId],
    truth: Option<ItemId>,
    mask_history: bool,
) -> Result<RankedList> {
    let rel = masked(scorer.relevance(history)?, history, mask_history);
    Ok(rank_relevance(&rel, truth))
}

/// 1-based rank of `truth` under the same ordering as [`rank_relevance`],
/// in O(|V|).
pub fn rank_of(relevance: &[f64], truth: ItemId) -> usize {
    let t = truth.index();
    let rt = relevance[t];
    1 + relevance
        .iter()
        .enumerate()
        .filter(|&(j, r)| match r.total_cmp(&rt) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => j < t,
            std::cmp::Ordering::Less => false,
        })
        .count()
}

pub fn hit_rate_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub n_users: usize,
    pub alpha: f64,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}", "metric", "value");
        for (k, v) in &self.recall_at {
            let _ = writeln!(s, "{:<16}{:>12.4}", format!("Recall@{k}"), v);
        }
        for (k, v) in &self.ndcg_at {
            let _ = writeln!(s, "{:<16}{:>12.4}", format!("NDCG@{k}"), v);
        }
        let _ = writeln!(s, "{:<16}{:>12.4}", "coverage", self.coverage);
        let _ = writeln!(s, "{:<16}{:>12.2}", "mean_set_size", self.mean_set_size);
        let _ = writeln!(s, "{:<16}{:>12}", "users", self.n_users);
        s
    }
}

/// Ranks per user of the last item given everything before it.
pub fn test_ranks<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset, mask_history: bool) -> Result<Vec<usize>> {
    let pairs = dataset.test_pairs();
    par::map(&pairs, |p| {
        let rel = masked(scorer.relevance(p.prefix)?, p.prefix, mask_history);
        Ok(rank_of(&rel, p.target))
    })
    .into_iter()
    .collect()
}

/// LOO metrics on the last item plus split conformal diagnostics, with the
/// penultimate items as the calibration set.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    alpha: f64,
    ks: &[usize],
    mask_history: bool,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::NoEligibleUsers);
    }
    let ranks = test_ranks(scorer, dataset, mask_history)?;
    let n = ranks.len() as f64;
    let mut recall_at = BTreeMap::new();
    let mut ndcg_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, ranks.iter().map(|&r| hit_rate_at_k(Some(r), k)).sum::<f64>() / n);
        ndcg_at.insert(k, ranks.iter().map(|&r| ndcg_at_k(Some(r), k)).sum::<f64>() / n);
    }
    let cp = split_cp(scorer, &dataset.validation_pairs(), &dataset.test_pairs(), alpha)?;
    Ok(MetricReport {
        recall_at,
        ndcg_at,
        coverage: cp.coverage,
        mean_set_size: cp.mean_set_size,
        n_users: ranks.len(),
        alpha,
    })
}

/// Mean NDCG@k of the penultimate item given the training prefix.
pub fn validation_ndcg<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset, k: usize) -> Result<f64> {
    let pairs = dataset.validation_pairs();
    if pairs.is_empty() {
        return Err(Error::NoEligibleUsers);
    }
    let vals: Vec<f64> = par::map(&pairs, |p| {
        Ok(ndcg_at_k(Some(rank_of(&scorer.relevance(p.prefix)?, p.target)), k))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        let r = rank_relevance(&[1.0, 2.0, 3.0], Some(ItemId(0)));
        assert_eq!(r.items, vec![ItemId(2), ItemId(1), ItemId(0)]);
        assert_eq!(r.rank_of_truth, Some(3));
        let r = rank_relevance(&[0.5; 4], None);
        assert_eq!(r.items, (0..4).map(ItemId::from).collect::<Vec<_>>());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(hit_rate_at_k(Some(1), 10), 1.0);
        assert_eq!(hit_rate_at_k(Some(11), 10), 0.0);
        assert_eq!(hit_rate_at_k(Some(10), 10), 1.0);
        assert_eq!(ndcg_at_k(Some(1), 10), 1.0);
        assert!((ndcg_at_k(Some(3), 10) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(Some(12), 10), 0.0);
    }

    #[test]
    fn masking_pushes_history_down() {
        let rel = masked(vec![5.0, 1.0, 3.0], &[ItemId(0)], true);
        let r = rank_relevance(&rel, Some(ItemId(0)));
        assert_eq!(r.items, vec![ItemId(2), ItemId(1), ItemId(0)]);
    }

    proptest! {
        #[test]
        fn counting_rank_matches_sort(rel in prop::collection::vec(-3i32..3, 1..40), t in 0usize..40) {
            let rel: Vec<f64> = rel.into_iter().map(f64::from).collect();
            let t = ItemId::from(t % rel.len());
            let full = rank_relevance(&rel, Some(t));
            prop_assert_eq!(full.rank_of_truth, Some(rank_of(&rel, t)));
            let mut sorted = full.items.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..rel.len()).map(ItemId::from).collect::<Vec<_>>());
        }

        #[test]
        fn ndcg_le_hr_and_monotone(r in 1usize..200, k1 in 1usize..100, dk in 0usize..100) {
            let k2 = k1 + dk;
            prop_assert!(ndcg_at_k(Some(r), k1) <= hit_rate_at_k(Some(r), k1));
            prop_assert!(hit_rate_at_k(Some(r), k1) <= hit_rate_at_k(Some(r), k2));
            prop_assert!(ndcg_at_k(Some(r), k1) <= ndcg_at_k(Some(r), k2));
        }
    }
}
