//! Training configuration and its flat key-value file format.
//!
//! Resolution order: built-in defaults, then the config file, then
//! command-line `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncoderKind;

/// Which loss terms are active during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ce: bool,
    pub cps: bool,
    pub cpd: bool,
}

impl LossConfig {
    pub const FULL: LossConfig = LossConfig { ce: true, cps: true, cpd: true };

    /// The five fine-tuning configurations compared in the ablation study.
    pub const ABLATIONS: [LossConfig; 5] = [
        LossConfig { ce: true, cps: false, cpd: false },
        LossConfig { ce: false, cps: true, cpd: false },
        LossConfig { ce: true, cps: true, cpd: false },
        LossConfig { ce: false, cps: true, cpd: true },
        LossConfig { ce: true, cps: true, cpd: true },
    ];

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ce {
            parts.push("CE");
        }
        if self.cps {
            parts.push("CPS");
        }
        if self.cpd {
            parts.push("CPD");
        }
        parts.join(",")
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.label())
    }
}

impl FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim().trim_start_matches('[').trim_end_matches(']');
        let mut cfg = LossConfig { ce: false, cps: false, cpd: false };
        for part in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "CE" => cfg.ce = true,
                "CPS" => cfg.cps = true,
                "CPD" => cfg.cpd = true,
                other => return Err(Error::Config(format!("unknown loss term {other:?}"))),
            }
        }
        if !(cfg.ce || cfg.cps || cfg.cpd) {
            return Err(Error::Config("loss_config selects no terms".into()));
        }
        Ok(cfg)
    }
}

/// CE supervision positions within the training prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Only the last item of the training prefix is a target.
    Final,
    /// Every item after the first is a target.
    AllPositions,
}

/// How the conformal threshold is refreshed during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QHatMode {
    /// Recomputed from each mini-batch's calibration scores.
    Batch,
    /// Computed once per epoch over all calibration users, then frozen.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub top_k_closest: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
    pub d: usize,
    pub loss_config: LossConfig,
    pub supervision: Supervision,
    /// Early-stopping patience on validation NDCG@10 during pretraining; 0 disables.
    pub patience: usize,
    pub q_hat_mode: QHatMode,
    /// Stop CPD gradients from reaching the ground-truth item's embedding.
    pub cpd_freeze_truth: bool,
    /// Let the CPS gradient flow through the per-batch threshold via the
    /// calibration score that sets it.
    pub quantile_grad: bool,
    /// Exclude already-seen items from the evaluation ranking.
    pub mask_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 10.0,
            gamma: 1.0,
            top_k_closest: 10,
            tau: 1e-2,
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            encoder: EncoderKind::Gru,
            d: 32,
            loss_config: LossConfig::FULL,
            supervision: Supervision::Final,
            patience: 5,
            q_hat_mode: QHatMode::Batch,
            cpd_freeze_truth: false,
            quantile_grad: true,
            mask_history: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "gamma",
    "top_k_closest",
    "tau",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "encoder",
    "d",
    "loss_config",
    "supervision",
    "patience",
    "q_hat_mode",
    "cpd_freeze_truth",
    "quantile_grad",
    "mask_history",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

impl TrainConfig {
    /// Effective weight of the set-size term.
    pub fn cps_weight(&self) -> f64 {
        if self.loss_config.cps {
            self.beta
        } else {
            0.0
        }
    }

    pub fn cpd_weight(&self) -> f64 {
        if self.loss_config.cpd {
            self.gamma
        } else {
            0.0
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "top_k_closest" => self.top_k_closest = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "encoder" => self.encoder = value.parse()?,
            "d" => self.d = parse(key, value)?,
            "loss_config" => self.loss_config = value.parse()?,
            "supervision" => {
                self.supervision = match value.trim() {
                    "final" => Supervision::Final,
                    "all" | "all_positions" => Supervision::AllPositions,
                    _ => return Err(Error::Config(format!("unknown supervision {value:?}"))),
                }
            }
            "patience" => self.patience = parse(key, value)?,
            "q_hat_mode" => {
                self.q_hat_mode = match value.trim() {
                    "batch" => QHatMode::Batch,
                    "epoch" => QHatMode::Epoch,
                    _ => return Err(Error::Config(format!("unknown q_hat_mode {value:?}"))),
                }
            }
            "cpd_freeze_truth" => self.cpd_freeze_truth = parse(key, value)?,
            "quantile_grad" => self.quantile_grad = parse(key, value)?,
            "mask_history" => self.mask_history = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Reads a flat TOML document (`key = value` lines, no tables).
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.merge_str(&text)
    }

    pub fn merge_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in table {
            let raw = match value {
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                toml::Value::Array(items) => items
                    .iter()
                    .map(|v| v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string()))
                    .collect::<Vec<_>>()
                    .join(","),
                _ => return Err(Error::Config(format!("{key}: nested tables are not allowed"))),
            };
            self.set(&key, &raw)?;
        }
        Ok(())
    }

    /// Flat string view of every key, in documented order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("gamma", self.gamma.to_string());
        put("top_k_closest", self.top_k_closest.to_string());
        put("tau", self.tau.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("encoder", self.encoder.to_string());
        put("d", self.d.to_string());
        put("loss_config", self.loss_config.label());
        put(
            "supervision",
            match self.supervision {
                Supervision::Final => "final",
                Supervision::AllPositions => "all",
            }
            .into(),
        );
        put("patience", self.patience.to_string());
        put(
            "q_hat_mode",
            match self.q_hat_mode {
                QHatMode::Batch => "batch",
                QHatMode::Epoch => "epoch",
            }
            .into(),
        );
        put("cpd_freeze_truth", self.cpd_freeze_truth.to_string());
        put("quantile_grad", self.quantile_grad.to_string());
        put("mask_history", self.mask_history.to_string());
        m
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative".into());
        }
        if self.top_k_closest == 0 {
            return bad("top_k_closest must be positive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.d == 0 {
            return bad("batch_size, epochs and d must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.beta, 10.0);
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.top_k_closest, 10);
        assert_eq!(c.learning_rate, 5e-4);
        c.validate().unwrap();
    }

    #[test]
    fn file_then_override() {
        let mut c = TrainConfig::default();
        c.merge_str("alpha = 0.1\nbeta = 2\nloss_config = \"CE,CPS\"\nencoder = \"mean_pool\"\n")
            .unwrap();
        c.apply_override("alpha=0.5").unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.beta, 2.0);
        assert_eq!(c.loss_config, LossConfig { ce: true, cps: true, cpd: false });
        assert_eq!(c.encoder, EncoderKind::MeanPool);
        assert!(c.apply_override("nonsense=1").is_err());
        assert!(c.merge_str("[table]\nx = 1\n").is_err());
    }

    #[test]
    fn map_round_trip() {
        let mut c = TrainConfig::default();
        c.set("tau", "0.001").unwrap();
        c.set("supervision", "all").unwrap();
        c.set("q_hat_mode", "epoch").unwrap();
        let back = TrainConfig::from_map(&c.to_map()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_map().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<String> = LossConfig::ABLATIONS.iter().map(|c| c.to_string()).collect();
        assert_eq!(labels, ["[CE]", "[CPS]", "[CE,CPS]", "[CPS,CPD]", "[CE,CPS,CPD]"]);
        for c in LossConfig::ABLATIONS {
            assert_eq!(c.to_string().parse::<LossConfig>().unwrap(), c);
        }
    }

    #[test]
    fn rejects_invalid() {
        let mut c = TrainConfig::default();
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }
}
