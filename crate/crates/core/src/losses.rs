//! Training objectives and their gradients.
//!
//! Gradients are returned with respect to each user's relevance vector
//! (CE, CPS) or directly with respect to item embeddings (CPD); the model
//! module chains them back to the parameters.

use std::collections::BTreeMap;

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, ScoreVector};
use crate::types::ItemId;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// One row per user, each of catalog length. Empty for CPD.
    pub grad_relevance: Vec<Vec<f64>>,
    /// Sparse embedding gradients. Only CPD fills this.
    pub grad_embeddings: BTreeMap<ItemId, Vec<f64>>,
}

impl LossValue {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_relevance.iter().flatten().all(|v| v.is_finite())
            && self.grad_embeddings.values().flatten().all(|v| v.is_finite())
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of the true next item; gradient is `softmax - onehot`.
pub fn ce_loss(conf: &ScoreVector, truth: ItemId) -> LossValue {
    let t = truth.index();
    let value = log_sum_exp(&conf.relevance) - conf.relevance[t];
    let mut grad = conf.confidence.clone();
    grad[t] -= 1.0;
    LossValue {
        value: value.max(0.0),
        grad_relevance: vec![grad],
        grad_embeddings: BTreeMap::new(),
    }
}

/// Mean prediction-set size over a batch.
pub fn cps_hard(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(sets.iter().map(|s| s.size() as f64).sum::<f64>() / sets.len() as f64)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft set size of one user and its gradient on relevance.
///
/// Membership `s_j <= q` is relaxed to `sigmoid((q - s_j) / tau)` with
/// `s_j = 1 - p_j`; the threshold is a constant.
pub fn soft_set_size(conf: &ScoreVector, q_hat: f64, tau: f64) -> (f64, Vec<f64>) {
    let p = &conf.confidence;
    let mut value = 0.0;
    let mut dp = Vec::with_capacity(p.len());
    for &pj in p {
        let sg = sigmoid((q_hat - (1.0 - pj)) / tau);
        value += sg;
        dp.push(sg * (1.0 - sg) / tau);
    }
    let inner: f64 = dp.iter().zip(p).map(|(g, pj)| g * pj).sum();
    let grad = dp.iter().zip(p).map(|(g, pj)| pj * (g - inner)).collect();
    (value, grad)
}

/// Derivative of [`soft_set_size`] with respect to the threshold.
pub fn soft_set_size_dq(conf: &ScoreVector, q_hat: f64, tau: f64) -> f64 {
    conf.confidence
        .iter()
        .map(|&pj| {
            let sg = sigmoid((q_hat - (1.0 - pj)) / tau);
            sg * (1.0 - sg) / tau
        })
        .sum()
}

/// Differentiable stand-in for [`cps_hard`].
pub fn cps_proxy(batch: &[ScoreVector], q_hat: f64, tau: f64) -> Result<LossValue> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grad_relevance = Vec::with_capacity(batch.len());
    for sv in batch {
        let (v, mut g) = soft_set_size(sv, q_hat, tau);
        value += v;
        g.iter_mut().for_each(|x| *x *= scale);
        grad_relevance.push(g);
    }
    Ok(LossValue {
        value: value * scale,
        grad_relevance,
        grad_embeddings: BTreeMap::new(),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// The `min(k, |set|)` set members most cosine-similar to `truth_emb`,
/// ordered by decreasing similarity, ties to the lower item index.
pub fn top_k_closest(
    set: &PredictionSet,
    truth_emb: &[f64],
    table: EmbeddingTable<'_>,
    k: usize,
) -> Vec<ItemId> {
    let take = k.min(set.size());
    if take == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(f64, ItemId)> = set
        .members
        .iter()
        .map(|&m| (cosine(table.row(m), truth_emb), m))
        .collect();
    let order = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if take < scored.len() {
        scored.select_nth_unstable_by(take - 1, order);
        scored.truncate(take);
    }
    scored.sort_by(order);
    scored.into_iter().map(|(_, m)| m).collect()
}

/// Items selected for one user's CPD term. Selection is held fixed while
/// differentiating.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CpdSelection {
    pub truth: ItemId,
    pub chosen: Vec<ItemId>,
}

pub fn cpd_select(
    batch: &[(PredictionSet, ItemId)],
    table: EmbeddingTable<'_>,
    k: usize,
) -> Vec<CpdSelection> {
    batch
        .iter()
        .map(|(set, truth)| CpdSelection {
            truth: *truth,
            chosen: top_k_closest(set, table.row(*truth), table, k),
        })
        .collect()
}

/// `(1 / (k |B|)) * sum_i sum_{v in K_i} (1 - cos(e_v, e_truth_i))`.
pub fn cpd_from_selection(
    selections: &[CpdSelection],
    table: EmbeddingTable<'_>,
    k: usize,
    freeze_truth: bool,
) -> Result<LossValue> {
    if selections.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = table.dim;
    let scale = 1.0 / (k as f64 * selections.len() as f64);
    let mut value = 0.0;
    let mut grads: BTreeMap<ItemId, Vec<f64>> = BTreeMap::new();
    for sel in selections {
        let b = table.row(sel.truth);
        let nb = norm(b);
        if nb == 0.0 {
            return Err(Error::ZeroNormEmbedding(sel.truth));
        }
        for &v in &sel.chosen {
            let a = table.row(v);
            let na = norm(a);
            if na == 0.0 {
                return Err(Error::ZeroNormEmbedding(v));
            }
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            value += 1.0 - cos;
            // d cos / d a = b / (|a||b|) - cos a / |a|^2, and symmetrically for b.
            let ga = grads.entry(v).or_insert_with(|| vec![0.0; d]);
            for i in 0..d {
                ga[i] -= scale * (b[i] / (na * nb) - cos * a[i] / (na * na));
            }
            if !freeze_truth {
                let gb = grads.entry(sel.truth).or_insert_with(|| vec![0.0; d]);
                for i in 0..d {
                    gb[i] -= scale * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
                }
            }
        }
    }
    Ok(LossValue {
        value: value * scale,
        grad_relevance: Vec::new(),
        grad_embeddings: grads,
    })
}

pub fn cpd_loss(
    batch: &[(PredictionSet, ItemId)],
    table: EmbeddingTable<'_>,
    k: usize,
    freeze_truth: bool,
) -> Result<LossValue> {
    if k == 0 {
        return Err(Error::Config("top_k_closest must be positive".into()));
    }
    let selections = cpd_select(batch, table, k);
    cpd_from_selection(&selections, table, k, freeze_truth)
}

/// `ce + beta * cps + gamma * cpd`. Relevance-gradient rows are summed
/// position-wise (a missing row counts as zero).
pub fn cpft_loss(ce: &LossValue, cps: &LossValue, cpd: &LossValue, beta: f64, gamma: f64) -> LossValue {
    let mut out = LossValue {
        value: ce.value + beta * cps.value + gamma * cpd.value,
        ..LossValue::default()
    };
    for (term, w) in [(ce, 1.0), (cps, beta), (cpd, gamma)] {
        for (i, row) in term.grad_relevance.iter().enumerate() {
            if out.grad_relevance.len() <= i {
                out.grad_relevance.push(vec![0.0; row.len()]);
            }
            for (a, b) in out.grad_relevance[i].iter_mut().zip(row) {
                *a += w * b;
            }
        }
        for (item, g) in &term.grad_embeddings {
            let acc = out
                .grad_embeddings
                .entry(*item)
                .or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in acc.iter_mut().zip(g) {
                *a += w * b;
            }
        }
    }
    out
}
