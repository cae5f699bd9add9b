//! Two-stage pipeline: cross-entropy pretraining on training prefixes, then
//! fine-tuning that adds the conformal set-size and set-distance terms on
//! calibration prefixes.
//!
//! Neither stage can read a user's last interaction: both work on a
//! [`FitUser`] view that drops it before training starts.

mod adam;
pub mod objective;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{QHatMode, TrainConfig};
use crate::conformal::{conformal_quantile, construct_set, nonconformity, ConformalThreshold, PredictionSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, rank_of};
use crate::losses::{cpd_loss, soft_set_size};
use crate::model::{ModelParams, Scorer, ScoreVector};
use crate::par;
use crate::types::ItemId;

pub use adam::{apply_update, OptimizerState};
pub use objective::{batch_gradient, batch_objective, BatchLosses, Frozen, Weights};

/// A user's history without its last item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FitUser {
    pub user: u64,
    items: Vec<ItemId>,
}

impl FitUser {
    pub fn new(user: u64, items: Vec<ItemId>) -> Self {
        assert!(items.len() >= 2, "fit view needs at least two items");
        Self { user, items }
    }

    /// `v_1..v_{T-2}`
    pub fn train_prefix(&self) -> &[ItemId] {
        &self.items[..self.items.len() - 1]
    }

    /// `v_{T-1}`, the calibration target during fine-tuning.
    pub fn validation_target(&self) -> ItemId {
        self.items[self.items.len() - 1]
    }
}

pub fn fit_view(dataset: &Dataset) -> Vec<FitUser> {
    dataset
        .splits()
        .iter()
        .map(|s| FitUser::new(s.user(), s.fit_items().to_vec()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Per-epoch record. `ce` is the mean training CE over the epoch; the other
/// fields come from an end-of-epoch audit with frozen parameters: the
/// threshold is calibrated on even-indexed users and applied to odd-indexed
/// ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub stage: Stage,
    pub epoch: usize,
    pub ce: f64,
    pub cps: f64,
    pub cpd: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
}

pub fn write_trace<W: Write>(mut out: W, traces: &[EpochTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Audit {
    pub cps: f64,
    pub cpd: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub q_hat: f64,
}

/// Split-conformal audit over the fit view's calibration pairs.
pub fn audit(params: &ModelParams, users: &[FitUser], cfg: &TrainConfig) -> Result<Audit> {
    if users.is_empty() {
        return Err(Error::EmptyCalibrationBatch);
    }
    let scored: Vec<ScoreVector> = par::map(users, |u| params.scores(u.train_prefix()))
        .into_iter()
        .collect::<Result<_>>()?;
    let (calib_idx, test_idx): (Vec<usize>, Vec<usize>) = if users.len() == 1 {
        (vec![0], vec![0])
    } else {
        (0..users.len()).partition(|i| i % 2 == 0)
    };
    let calib_scores: Vec<f64> = calib_idx
        .iter()
        .map(|&i| 1.0 - scored[i].confidence[users[i].validation_target().index()])
        .collect();
    let threshold: ConformalThreshold = conformal_quantile(&calib_scores, cfg.alpha)?;
    let mut covered = 0usize;
    let mut size_sum = 0.0;
    let mut soft_sum = 0.0;
    let mut batch: Vec<(PredictionSet, ItemId)> = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let set = construct_set(users[i].user, &nonconformity(&scored[i]), &threshold);
        let truth = users[i].validation_target();
        covered += usize::from(set.contains(truth));
        size_sum += set.size() as f64;
        soft_sum += soft_set_size(&scored[i], threshold.q_hat, cfg.tau).0;
        batch.push((set, truth));
    }
    let n = test_idx.len() as f64;
    let cpd = cpd_loss(&batch, params.embedding_table(), cfg.top_k_closest, cfg.cpd_freeze_truth)?.value;
    Ok(Audit {
        cps: soft_sum / n,
        cpd,
        coverage: covered as f64 / n,
        mean_set_size: size_sum / n,
        q_hat: threshold.q_hat,
    })
}

fn fit_validation_ndcg(params: &ModelParams, users: &[FitUser], k: usize) -> Result<f64> {
    let vals: Vec<f64> = par::map(users, |u| {
        let rel = params.relevance(u.train_prefix())?;
        Ok(ndcg_at_k(Some(rank_of(&rel, u.validation_target())), k))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

fn run_stage(
    mut params: ModelParams,
    users: &[FitUser],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(ModelParams, Vec<EpochTrace>)> {
    cfg.validate()?;
    if users.is_empty() {
        return Err(Error::EmptyCalibrationBatch);
    }
    let weights = match stage {
        Stage::Pretrain => Weights::ce_only(),
        Stage::Finetune => Weights::from_config(cfg),
    };
    let early_stop = stage == Stage::Pretrain && cfg.patience > 0;
    let mut opt = OptimizerState::for_params(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..users.len()).collect();
    let mut traces = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let q_epoch = if cfg.q_hat_mode == QHatMode::Epoch && (weights.cps > 0.0 || weights.cpd > 0.0) {
            let scores: Vec<f64> = par::map(users, |u| {
                params
                    .scores(u.train_prefix())
                    .map(|sv| 1.0 - sv.confidence[u.validation_target().index()])
            })
            .into_iter()
            .collect::<Result<_>>()?;
            Some(conformal_quantile(&scores, cfg.alpha)?.q_hat)
        } else {
            None
        };

        let (mut ce_sum, mut ce_n) = (0.0, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&FitUser> = batch_idx.iter().map(|&i| &users[i]).collect();
            let out = batch_gradient(&params, &batch, cfg, weights, q_epoch)?;
            if !out.losses.total.is_finite() || !out.grads.is_finite() {
                return Err(Error::DivergenceDetected { epoch, what: "batch loss" });
            }
            ce_sum += out.losses.ce * out.losses.n_ce as f64;
            ce_n += out.losses.n_ce;
            if out.losses.n_ce == 0 && out.frozen.is_none() {
                continue;
            }
            apply_update(&mut params, &mut opt, &out.grads)?;
        }
        if !params.is_finite() {
            return Err(Error::DivergenceDetected { epoch, what: "parameters" });
        }

        let a = audit(&params, users, cfg)?;
        let trace = EpochTrace {
            stage,
            epoch,
            ce: if ce_n > 0 { ce_sum / ce_n as f64 } else { 0.0 },
            cps: a.cps,
            cpd: a.cpd,
            coverage: a.coverage,
            mean_set_size: a.mean_set_size,
        };
        log::debug!("{stage:?} {trace:?}");
        traces.push(trace);

        if early_stop {
            let score = fit_validation_ndcg(&params, users, 10)?;
            match &best {
                Some((b, _)) if score <= *b => {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        log::info!("early stop at epoch {epoch} (best NDCG@10 {b:.4})");
                        break;
                    }
                }
                _ => {
                    best = Some((score, params.clone()));
                    since_best = 0;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok((params, traces))
}

/// Stage one: minimise CE over training prefixes.
pub fn pretrain(
    params: ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochTrace>)> {
    run_stage(params, &fit_view(dataset), cfg, Stage::Pretrain)
}

/// Stage two: minimise `CE + beta * CPS + gamma * CPD` with the loss terms
/// selected by `cfg.loss_config`.
pub fn finetune(
    params: ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochTrace>)> {
    run_stage(params, &fit_view(dataset), cfg, Stage::Finetune)
}

/// Same as [`pretrain`]/[`finetune`] on an explicit fit view.
pub fn run_on_view(
    params: ModelParams,
    users: &[FitUser],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(ModelParams, Vec<EpochTrace>)> {
    run_stage(params, users, cfg, stage)
}
