//! Interaction data: ingestion, vocabulary, sequence splits, binary cache and
//! a seeded Markov-chain generator.

mod cache;
mod ingest;
mod synth;

use serde::{Deserialize, Serialize};

use crate::conformal::LabeledPrefix;
use crate::error::{Error, Result};
use crate::types::{validate_sequence, InteractionSequence, SequenceSplit, MIN_SEQUENCE_LEN};

pub use cache::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use ingest::{ingest, ingest_reader, read_vocabulary, write_vocabulary, LogFormat, Vocabulary};
pub use synth::{generate_synthetic, MarkovChain, SynthSpec};

/// Sequences that survived filtering, with their splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sequences: Vec<InteractionSequence>,
    catalog_size: usize,
    splits: Vec<SequenceSplit>,
    dropped: usize,
}

/// Summary in the usual #Users / #Items / #Inters / Avg.U / Avg.I layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_per_user: f64,
    pub avg_per_item: f64,
    pub dropped_users: usize,
}

impl Dataset {
    /// Validates every sequence and drops those shorter than three items.
    pub fn new(sequences: Vec<InteractionSequence>, catalog_size: usize) -> Result<Self> {
        Self::with_dropped(sequences, catalog_size, 0)
    }

    pub(crate) fn with_dropped(
        sequences: Vec<InteractionSequence>,
        catalog_size: usize,
        already_dropped: usize,
    ) -> Result<Self> {
        let before = sequences.len();
        let mut kept = Vec::with_capacity(before);
        for seq in sequences {
            if seq.len() < MIN_SEQUENCE_LEN {
                continue;
            }
            validate_sequence(&seq, catalog_size)?;
            kept.push(seq);
        }
        let dropped = already_dropped + before - kept.len();
        if dropped > 0 {
            log::info!("dropped {dropped} users with fewer than {MIN_SEQUENCE_LEN} interactions");
        }
        let splits = split_all(&kept)?;
        Ok(Self {
            sequences: kept,
            catalog_size,
            splits,
            dropped,
        })
    }

    pub fn sequences(&self) -> &[InteractionSequence] {
        &self.sequences
    }

    pub fn splits(&self) -> &[SequenceSplit] {
        &self.splits
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.sequences.len();
        let interactions: usize = self.sequences.iter().map(|s| s.len()).sum();
        let mut seen = vec![false; self.catalog_size];
        for s in &self.sequences {
            for it in &s.items {
                seen[it.index()] = true;
            }
        }
        let items = seen.iter().filter(|&&b| b).count();
        DatasetStats {
            users,
            items,
            interactions,
            avg_per_user: if users > 0 { interactions as f64 / users as f64 } else { 0.0 },
            avg_per_item: if items > 0 { interactions as f64 / items as f64 } else { 0.0 },
            dropped_users: self.dropped,
        }
    }

    /// (training prefix, penultimate item) per user: the calibration pairs
    /// used while fitting, never touching the last item.
    pub fn validation_pairs(&self) -> Vec<LabeledPrefix<'_>> {
        self.splits
            .iter()
            .map(|s| LabeledPrefix {
                user: s.user(),
                prefix: s.train_prefix(),
                target: s.validation_target(),
            })
            .collect()
    }

    /// (calibration prefix, last item) per user: the held-out test pairs.
    pub fn test_pairs(&self) -> Vec<LabeledPrefix<'_>> {
        self.splits
            .iter()
            .map(|s| LabeledPrefix {
                user: s.user(),
                prefix: s.calib_prefix(),
                target: s.test_target(),
            })
            .collect()
    }
}

pub fn split(dataset: &Dataset) -> Vec<SequenceSplit> {
    dataset.splits.clone()
}

fn split_all(seqs: &[InteractionSequence]) -> Result<Vec<SequenceSplit>> {
    seqs.iter().map(SequenceSplit::new).collect()
}

/// Splits one sequence; shorter than three items is an error.
pub fn split_sequence(seq: &InteractionSequence) -> Result<SequenceSplit> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    SequenceSplit::new(seq)
}
