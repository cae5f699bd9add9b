//! Split conformal prediction over the item catalog.
//!
//! Nonconformity of item `j` is `1 - softmax(relevance)_j`. Given `n`
//! calibration scores of the true items, the threshold is the `k`-th
//! smallest with `k = min(n, ceil((1 - alpha)(n + 1)))`, and a prediction
//! set keeps every item whose score is at or below it.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Scorer, ScoreVector};
use crate::par;
use crate::types::ItemId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub user: u64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub q_hat: f64,
    pub alpha: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub user: u64,
    /// Ascending item order.
    pub members: Vec<ItemId>,
}

impl PredictionSet {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.members.binary_search(&item).is_ok()
    }
}

pub fn nonconformity(conf: &ScoreVector) -> Vec<f64> {
    conf.confidence.iter().map(|c| 1.0 - c).collect()
}

/// Rank (1-based) of the order statistic used as threshold.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let level = ((1.0 - alpha) * (n as f64 + 1.0)).ceil();
    (level.max(1.0) as usize).min(n)
}

pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<ConformalThreshold> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let n = scores.len();
    let k = quantile_rank(n, alpha);
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(ConformalThreshold {
        q_hat: *kth,
        alpha,
        n,
    })
}

/// Position in `scores` of the calibration point that sets `q_hat` (the
/// first one on ties).
pub fn quantile_index(scores: &[f64], alpha: f64) -> Result<usize> {
    let t = conformal_quantile(scores, alpha)?;
    Ok(scores
        .iter()
        .position(|s| s.total_cmp(&t.q_hat).is_eq())
        .expect("quantile is one of the scores"))
}

/// Items whose nonconformity is at or below the threshold (ties included).
pub fn construct_set(user: u64, scores: &[f64], threshold: &ConformalThreshold) -> PredictionSet {
    PredictionSet {
        user,
        members: scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= threshold.q_hat)
            .map(|(j, _)| ItemId::from(j))
            .collect(),
    }
}

/// Number of items in the set, without materialising it.
pub fn set_size(scores: &[f64], q_hat: f64) -> usize {
    scores.iter().filter(|&&s| s <= q_hat).count()
}

pub fn coverage_rate(sets: &[PredictionSet], truths: &[ItemId]) -> Result<f64> {
    if sets.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: sets.len(),
            right: truths.len(),
        });
    }
    if sets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = sets
        .iter()
        .zip(truths)
        .filter(|(s, &t)| s.contains(t))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}

/// A history with the item that actually followed it.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPrefix<'a> {
    pub user: u64,
    pub prefix: &'a [ItemId],
    pub target: ItemId,
}

#[derive(Clone, Debug)]
pub struct SplitCpOutcome {
    pub threshold: ConformalThreshold,
    pub calibration: Vec<CalibrationRecord>,
    pub sets: Vec<PredictionSet>,
    pub truths: Vec<ItemId>,
    pub coverage: f64,
    pub mean_set_size: f64,
}

impl SplitCpOutcome {
    pub fn audit_records(&self) -> Vec<AuditRecord> {
        self.sets
            .iter()
            .zip(&self.truths)
            .map(|(s, &t)| AuditRecord {
                user: s.user,
                set_size: s.size(),
                covered: u8::from(s.contains(t)),
                q_hat: self.threshold.q_hat,
                alpha: self.threshold.alpha,
            })
            .collect()
    }
}

/// Calibration scores of the true items for each labelled prefix.
pub fn calibration_scores<S: Scorer + ?Sized>(
    model: &S,
    points: &[LabeledPrefix<'_>],
) -> Result<Vec<CalibrationRecord>> {
    par::map(points, |p| {
        let sv = model.scores(p.prefix)?;
        Ok(CalibrationRecord {
            user: p.user,
            score: 1.0 - sv.confidence[p.target.index()],
        })
    })
    .into_iter()
    .collect()
}

/// Split conformal prediction with an already-fitted model: calibrate on
/// `calib`, then build and check a set for every point of `test`.
pub fn split_cp<S: Scorer + ?Sized>(
    model: &S,
    calib: &[LabeledPrefix<'_>],
    test: &[LabeledPrefix<'_>],
    alpha: f64,
) -> Result<SplitCpOutcome> {
    let calibration = calibration_scores(model, calib)?;
    let scores: Vec<f64> = calibration.iter().map(|r| r.score).collect();
    let threshold = conformal_quantile(&scores, alpha)?;
    let sets: Vec<PredictionSet> = par::map(test, |p| {
        let sv = model.scores(p.prefix)?;
        Ok(construct_set(p.user, &nonconformity(&sv), &threshold))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let truths: Vec<ItemId> = test.iter().map(|p| p.target).collect();
    let coverage = coverage_rate(&sets, &truths)?;
    let mean_set_size = sets.iter().map(|s| s.size() as f64).sum::<f64>() / sets.len() as f64;
    Ok(SplitCpOutcome {
        threshold,
        calibration,
        sets,
        truths,
        coverage,
        mean_set_size,
    })
}

/// One line of the coverage audit report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub user: u64,
    pub set_size: usize,
    pub covered: u8,
    pub q_hat: f64,
    pub alpha: f64,
}

pub fn write_audit<W: Write>(mut out: W, records: &[AuditRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
