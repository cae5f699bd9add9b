//! Seeded Markov-chain interaction generator.
//!
//! Every item has one designated successor drawn as a random permutation.
//! From item `i` the next item is that successor with probability
//! `transition_concentration`; otherwise it is uniform over the remaining
//! `n_items - 1` items. At concentration `1 / n_items` transitions are
//! uniform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::par;
use crate::types::{InteractionSequence, ItemId, MIN_SEQUENCE_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub transition_concentration: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 200,
            min_len: 5,
            max_len: 15,
            transition_concentration: 0.9,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items < 2 {
            return Err(Error::Config("need at least one user and two items".into()));
        }
        if self.min_len < MIN_SEQUENCE_LEN || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "sequence lengths must satisfy {MIN_SEQUENCE_LEN} <= min_len <= max_len"
            )));
        }
        let c = self.transition_concentration;
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::Config(format!("transition_concentration must be in (0,1], got {c}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    successor: Vec<ItemId>,
    concentration: f64,
}

impl MarkovChain {
    pub fn from_spec(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut successor: Vec<ItemId> = (0..spec.n_items).map(ItemId::from).collect();
        successor.shuffle(&mut rng);
        Self {
            successor,
            concentration: spec.transition_concentration,
        }
    }

    pub fn n_items(&self) -> usize {
        self.successor.len()
    }

    pub fn successor(&self, item: ItemId) -> ItemId {
        self.successor[item.index()]
    }

    pub fn transition_prob(&self, from: ItemId, to: ItemId) -> f64 {
        if self.successor(from) == to {
            self.concentration
        } else {
            (1.0 - self.concentration) / (self.n_items() - 1) as f64
        }
    }

    fn step(&self, from: ItemId, rng: &mut ChaCha8Rng) -> ItemId {
        let succ = self.successor(from);
        if rng.random::<f64>() < self.concentration {
            return succ;
        }
        let r = rng.random_range(0..self.n_items() - 1);
        if r >= succ.index() {
            ItemId::from(r + 1)
        } else {
            ItemId::from(r)
        }
    }
}

/// Scores by log transition probability from the last item.
impl Scorer for MarkovChain {
    fn catalog_size(&self) -> usize {
        self.n_items()
    }

    fn relevance(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        let last = *items.last().ok_or(Error::EmptySequence)?;
        Ok((0..self.n_items())
            .map(|j| self.transition_prob(last, ItemId::from(j)).ln())
            .collect())
    }
}

fn user_rng(seed: u64, user: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user + 1);
    rng
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let chain = MarkovChain::from_spec(spec);
    let sequences = par::map_range(spec.n_users, |u| {
        let mut rng = user_rng(spec.seed, u as u64);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut items = Vec::with_capacity(len);
        let mut cur = ItemId::from(rng.random_range(0..spec.n_items));
        items.push(cur);
        for _ in 1..len {
            cur = chain.step(cur, &mut rng);
            items.push(cur);
        }
        InteractionSequence::new(u as u64, items)
    });
    Dataset::new(sequences, spec.n_items)
}
