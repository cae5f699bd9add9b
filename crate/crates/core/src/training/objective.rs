//! Mini-batch objective: CE on training prefixes plus the conformal terms on
//! calibration prefixes, with gradients chained back to the parameters.

use crate::config::{Supervision, TrainConfig};
use crate::conformal::{conformal_quantile, construct_set, nonconformity, quantile_index, PredictionSet};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, cpd_from_selection, cpd_select, soft_set_size, soft_set_size_dq, CpdSelection};
use crate::model::{Forward, GradientBundle, ModelParams, ScoreVector};
use crate::par;
use crate::types::ItemId;

use super::FitUser;

/// Which terms a stage optimises.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub ce: bool,
    pub cps: f64,
    pub cpd: f64,
}

impl Weights {
    pub fn ce_only() -> Self {
        Self { ce: true, cps: 0.0, cpd: 0.0 }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            ce: cfg.loss_config.ce,
            cps: cfg.cps_weight(),
            cpd: cfg.cpd_weight(),
        }
    }

    fn uses_calibration(&self) -> bool {
        self.cps > 0.0 || self.cpd > 0.0
    }
}

/// Non-differentiable choices made at the current parameters and held
/// constant while differentiating.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub q_hat: f64,
    /// Batch position whose calibration score is the threshold, when the
    /// threshold is differentiated.
    pub q_source: Option<usize>,
    pub selections: Vec<CpdSelection>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLosses {
    /// Mean CE over the batch's supervised positions.
    pub ce: f64,
    pub n_ce: usize,
    /// Soft set size per calibration user.
    pub cps: f64,
    pub cpd: f64,
    /// Exact mean set size at the batch threshold.
    pub hard_set_size: f64,
    pub total: f64,
}

pub struct BatchGradient {
    pub losses: BatchLosses,
    pub grads: GradientBundle,
    pub frozen: Option<Frozen>,
}

/// `(input length, target)` pairs inside a training prefix.
pub fn ce_positions(prefix: &[ItemId], supervision: Supervision) -> Vec<(usize, ItemId)> {
    let n = prefix.len();
    if n < 2 {
        return Vec::new();
    }
    match supervision {
        Supervision::Final => vec![(n - 1, prefix[n - 1])],
        Supervision::AllPositions => (1..n).map(|t| (t, prefix[t])).collect(),
    }
}

struct CalibForward {
    fwd: Forward,
    sv: ScoreVector,
    target: ItemId,
}

fn calib_forwards(params: &ModelParams, users: &[&FitUser]) -> Result<Vec<CalibForward>> {
    par::map(users, |u| {
        let fwd = params.forward(u.train_prefix())?;
        let sv = ScoreVector::from_relevance(params.relevance_from(&fwd.h));
        Ok(CalibForward {
            fwd,
            sv,
            target: u.validation_target(),
        })
    })
    .into_iter()
    .collect()
}

/// Loss and gradient for one mini-batch. `q_override` replaces the
/// per-batch threshold (epoch-frozen mode).
pub fn batch_gradient(
    params: &ModelParams,
    users: &[&FitUser],
    cfg: &TrainConfig,
    weights: Weights,
    q_override: Option<f64>,
) -> Result<BatchGradient> {
    let n_ce: usize = if weights.ce {
        users
            .iter()
            .map(|u| ce_positions(u.train_prefix(), cfg.supervision).len())
            .sum()
    } else {
        0
    };
    let calib = if weights.uses_calibration() {
        if users.is_empty() {
            return Err(Error::EmptyCalibrationBatch);
        }
        Some(calib_forwards(params, users)?)
    } else {
        None
    };

    let mut losses = BatchLosses {
        n_ce,
        ..BatchLosses::default()
    };
    let mut frozen = None;
    if let Some(cal) = &calib {
        let (q_hat, q_source) = match q_override {
            Some(q) => (q, None),
            None => {
                let truth_scores: Vec<f64> =
                    cal.iter().map(|c| 1.0 - c.sv.confidence[c.target.index()]).collect();
                let q = conformal_quantile(&truth_scores, cfg.alpha)?.q_hat;
                let src = if cfg.quantile_grad && weights.cps > 0.0 {
                    Some(quantile_index(&truth_scores, cfg.alpha)?)
                } else {
                    None
                };
                (q, src)
            }
        };
        let threshold = crate::conformal::ConformalThreshold {
            q_hat,
            alpha: cfg.alpha,
            n: cal.len(),
        };
        let sets: Vec<PredictionSet> = users
            .iter()
            .zip(cal)
            .map(|(u, c)| construct_set(u.user, &nonconformity(&c.sv), &threshold))
            .collect();
        losses.hard_set_size =
            sets.iter().map(|s| s.size() as f64).sum::<f64>() / sets.len() as f64;
        let selections = if weights.cpd > 0.0 {
            let batch: Vec<(PredictionSet, ItemId)> = sets
                .iter()
                .cloned()
                .zip(cal.iter().map(|c| c.target))
                .collect();
            cpd_select(&batch, params.embedding_table(), cfg.top_k_closest)
        } else {
            Vec::new()
        };
        frozen = Some(Frozen { q_hat, q_source, selections });
    }

    let ce_scale = if n_ce > 0 { 1.0 / n_ce as f64 } else { 0.0 };
    let cps_scale = weights.cps / users.len().max(1) as f64;
    let q_hat = frozen.as_ref().map(|f| f.q_hat).unwrap_or(0.0);
    let q_source = frozen.as_ref().and_then(|f| f.q_source);
    let indices: Vec<usize> = (0..users.len()).collect();
    // d(cps)/d(q_hat), routed to the calibration score that sets q_hat
    let dq = match (q_source, &calib) {
        (Some(_), Some(cal)) => {
            let parts = par::map(cal, |c| soft_set_size_dq(&c.sv, q_hat, cfg.tau));
            parts.iter().sum::<f64>() * cps_scale
        }
        _ => 0.0,
    };

    let partials = par::map_chunks(&indices, par::GRAD_CHUNK, |chunk| -> Result<(GradientBundle, f64, f64)> {
        let mut grads = GradientBundle::zeros_like(params);
        let (mut ce_sum, mut cps_sum) = (0.0, 0.0);
        for &i in chunk {
            let u = users[i];
            if weights.ce {
                let prefix = u.train_prefix();
                for (len, target) in ce_positions(prefix, cfg.supervision) {
                    let fwd = params.forward(&prefix[..len])?;
                    let sv = ScoreVector::from_relevance(params.relevance_from(&fwd.h));
                    let l = ce_loss(&sv, target);
                    ce_sum += l.value;
                    let mut g = l.grad_relevance.into_iter().next().unwrap();
                    g.iter_mut().for_each(|v| *v *= ce_scale);
                    params.accumulate_backward(&fwd, &g, None, &mut grads)?;
                }
            }
            if weights.cps > 0.0 {
                let c = &calib.as_ref().expect("calibration forwards")[i];
                let (v, mut g) = soft_set_size(&c.sv, q_hat, cfg.tau);
                cps_sum += v;
                g.iter_mut().for_each(|x| *x *= cps_scale);
                if q_source == Some(i) {
                    // s_t = 1 - p_t, so ds_t/dr_j = -p_t (1[j = t] - p_j)
                    let p = &c.sv.confidence;
                    let t = c.target.index();
                    for (j, x) in g.iter_mut().enumerate() {
                        let delta = if j == t { 1.0 } else { 0.0 };
                        *x -= dq * p[t] * (delta - p[j]);
                    }
                }
                params.accumulate_backward(&c.fwd, &g, None, &mut grads)?;
            }
        }
        Ok((grads, ce_sum, cps_sum))
    });

    let mut grads = GradientBundle::zeros_like(params);
    let (mut ce_sum, mut cps_sum) = (0.0, 0.0);
    for part in partials {
        let (g, c, s) = part?;
        grads.add_assign(&g);
        ce_sum += c;
        cps_sum += s;
    }
    losses.ce = ce_sum * ce_scale;
    if weights.cps > 0.0 {
        losses.cps = cps_sum / users.len() as f64;
    }

    if weights.cpd > 0.0 {
        let f = frozen.as_ref().expect("frozen selection");
        let l = cpd_from_selection(
            &f.selections,
            params.embedding_table(),
            cfg.top_k_closest,
            cfg.cpd_freeze_truth,
        )?;
        losses.cpd = l.value;
        let d = params.dim();
        for (item, g) in l.grad_embeddings {
            let row = grads.embedding_row_mut(item, d);
            for (a, b) in row.iter_mut().zip(&g) {
                *a += weights.cpd * b;
            }
        }
    }
    losses.total = losses.ce + weights.cps * losses.cps + weights.cpd * losses.cpd;
    Ok(BatchGradient {
        losses,
        grads,
        frozen,
    })
}

/// The same objective as [`batch_gradient`] with the CPD selection held
/// fixed; the threshold is recomputed from `params` when `frozen.q_source`
/// is set and taken from `frozen` otherwise. Used for finite-difference
/// checks.
pub fn batch_objective(
    params: &ModelParams,
    users: &[&FitUser],
    cfg: &TrainConfig,
    weights: Weights,
    frozen: Option<&Frozen>,
) -> Result<f64> {
    let mut ce_sum = 0.0;
    let mut n_ce = 0usize;
    let mut cps_sum = 0.0;
    let q_hat = match frozen {
        Some(f) if f.q_source.is_some() => {
            let truth: Vec<f64> = users
                .iter()
                .map(|u| {
                    let sv = ScoreVector::from_relevance(
                        params.relevance_from(&params.forward(u.train_prefix())?.h),
                    );
                    Ok(1.0 - sv.confidence[u.validation_target().index()])
                })
                .collect::<Result<_>>()?;
            conformal_quantile(&truth, cfg.alpha)?.q_hat
        }
        Some(f) => f.q_hat,
        None => 0.0,
    };
    for u in users {
        if weights.ce {
            let prefix = u.train_prefix();
            for (len, target) in ce_positions(prefix, cfg.supervision) {
                let sv = ScoreVector::from_relevance(
                    params.relevance_from(&params.forward(&prefix[..len])?.h),
                );
                ce_sum += ce_loss(&sv, target).value;
                n_ce += 1;
            }
        }
        if weights.cps > 0.0 {
            frozen.ok_or(Error::EmptyCalibrationBatch)?;
            let sv = ScoreVector::from_relevance(
                params.relevance_from(&params.forward(u.train_prefix())?.h),
            );
            cps_sum += soft_set_size(&sv, q_hat, cfg.tau).0;
        }
    }
    let mut total = if n_ce > 0 { ce_sum / n_ce as f64 } else { 0.0 };
    if weights.cps > 0.0 {
        total += weights.cps * cps_sum / users.len() as f64;
    }
    if weights.cpd > 0.0 {
        let f = frozen.ok_or(Error::EmptyCalibrationBatch)?;
        let l = cpd_from_selection(
            &f.selections,
            params.embedding_table(),
            cfg.top_k_closest,
            cfg.cpd_freeze_truth,
        )?;
        total += weights.cpd * l.value;
    }
    Ok(total)
}
