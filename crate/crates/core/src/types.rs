//! Domain types shared across the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense item index in `[0, catalog_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ItemId {
    fn from(i: usize) -> Self {
        ItemId(i as u32)
    }
}

/// One user's chronologically ordered interactions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user: u64,
    pub items: Vec<ItemId>,
}

impl InteractionSequence {
    pub fn new(user: u64, items: impl IntoIterator<Item = ItemId>) -> Self {
        Self {
            user,
            items: items.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn validate_items(items: &[ItemId], catalog_size: usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptySequence);
    }
    match items.iter().position(|it| it.index() >= catalog_size) {
        Some(position) => Err(Error::OutOfCatalog {
            item: items[position].0,
            position,
        }),
        None => Ok(()),
    }
}

pub fn validate_sequence(seq: &InteractionSequence, catalog_size: usize) -> Result<()> {
    validate_items(&seq.items, catalog_size)
}

/// Shortest sequence that yields non-empty training and calibration prefixes.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// Training / calibration / test partition of one sequence `v_1..v_T`.
///
/// - training prefix: `v_1..v_{T-2}`
/// - calibration prefix: `v_1..v_{T-1}`
/// - calibration and test target: `v_T`
///
/// During fine-tuning the last item is never read; the calibration pair is
/// shifted one step left to (training prefix, `v_{T-1}`), see
/// [`SequenceSplit::validation_target`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSplit {
    user: u64,
    items: Vec<ItemId>,
}

impl SequenceSplit {
    pub fn new(seq: &InteractionSequence) -> Result<Self> {
        if seq.len() < MIN_SEQUENCE_LEN {
            return Err(Error::TooShort { len: seq.len() });
        }
        Ok(Self {
            user: seq.user,
            items: seq.items.clone(),
        })
    }

    pub fn user(&self) -> u64 {
        self.user
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn train_prefix(&self) -> &[ItemId] {
        &self.items[..self.items.len() - 2]
    }

    pub fn calib_prefix(&self) -> &[ItemId] {
        &self.items[..self.items.len() - 1]
    }

    pub fn calib_target(&self) -> ItemId {
        self.items[self.items.len() - 1]
    }

    pub fn test_target(&self) -> ItemId {
        self.items[self.items.len() - 1]
    }

    /// The penultimate item, used as the calibration target while fine-tuning.
    pub fn validation_target(&self) -> ItemId {
        self.items[self.items.len() - 2]
    }

    /// Everything except the test target.
    pub fn fit_items(&self) -> &[ItemId] {
        self.calib_prefix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(items: &[u32]) -> InteractionSequence {
        InteractionSequence::new(0, items.iter().map(|&i| ItemId(i)))
    }

    #[test]
    fn validate_examples() {
        assert!(validate_sequence(&seq(&[0, 1, 2]), 5).is_ok());
        match validate_sequence(&seq(&[0, 7]), 5) {
            Err(Error::OutOfCatalog { item: 7, position: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            validate_sequence(&seq(&[]), 5),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn split_of_four() {
        let s = SequenceSplit::new(&seq(&[10, 11, 12, 13])).unwrap();
        assert_eq!(s.train_prefix(), &[ItemId(10), ItemId(11)]);
        assert_eq!(s.calib_prefix(), &[ItemId(10), ItemId(11), ItemId(12)]);
        assert_eq!(s.test_target(), ItemId(13));
        assert_eq!(s.calib_target(), ItemId(13));
        assert_eq!(s.validation_target(), ItemId(12));
    }

    #[test]
    fn split_minimal_and_too_short() {
        let s = SequenceSplit::new(&seq(&[1, 2, 3])).unwrap();
        assert_eq!(s.train_prefix(), &[ItemId(1)]);
        assert_eq!(s.calib_prefix(), &[ItemId(1), ItemId(2)]);
        assert_eq!(s.test_target(), ItemId(3));
        assert!(matches!(
            SequenceSplit::new(&seq(&[1, 2])),
            Err(Error::TooShort { len: 2 })
        ));
    }

    #[test]
    fn split_reconstructs_source() {
        let src = seq(&[4, 2, 9, 9, 1, 0]);
        let s = SequenceSplit::new(&src).unwrap();
        let mut rebuilt = s.train_prefix().to_vec();
        rebuilt.push(*s.calib_prefix().last().unwrap());
        rebuilt.push(s.calib_target());
        assert_eq!(rebuilt, src.items);
        assert_eq!(s.calib_prefix().len(), s.train_prefix().len() + 1);
        assert!(s.calib_prefix().starts_with(s.train_prefix()));
    }
}
