//! Conformal-prediction fine-tuning for sequential next-item recommenders.
//!
//! A small recurrent (or mean-pool) sequence encoder is pretrained with
//! cross-entropy and then fine-tuned with two extra objectives computed on
//! held-out calibration prefixes:
//!
//! - a set-size objective that shrinks split-conformal prediction sets, and
//! - a set-distance objective that pulls the members of each set closest to
//!   the ground-truth item towards it in embedding space.
//!
//! The crate also carries split conformal calibration, coverage auditing,
//! leave-one-out ranking metrics, interaction-log ingestion and a seeded
//! Markov-chain generator for desk-scale experiments.

pub mod cli;
pub mod config;
pub mod conformal;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod par;
pub mod training;
pub mod types;

pub use config::{LossConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{EncoderKind, ModelParams, Scorer, ScoreVector};
pub use types::{InteractionSequence, ItemId, SequenceSplit};
