//! Sequence encoder, full-catalog scoring and hand-derived gradients.
//!
//! All trainable state lives in one flat `f64` buffer laid out as
//!
//! ```text
//! embeddings            |V| x d   (shared by input lookup and output scoring)
//! encoder weights       variant-specific, see `gru`
//! ```
//!
//! so the optimizer, gradient bundles and checkpoints all work on plain slices.

mod checkpoint;
mod gru;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_items, ItemId};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Single-layer gated recurrent cell with last-position readout.
    Gru,
    /// Mean of the item embeddings; no encoder weights.
    MeanPool,
}

impl EncoderKind {
    pub fn tag(self) -> u8 {
        match self {
            EncoderKind::Gru => 0,
            EncoderKind::MeanPool => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(EncoderKind::Gru),
            1 => Some(EncoderKind::MeanPool),
            _ => None,
        }
    }

    fn encoder_len(self, dim: usize) -> usize {
        match self {
            EncoderKind::Gru => gru::param_len(dim),
            EncoderKind::MeanPool => 0,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Gru => "gru",
            EncoderKind::MeanPool => "mean_pool",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gru" => Ok(EncoderKind::Gru),
            "mean_pool" | "meanpool" | "mean" => Ok(EncoderKind::MeanPool),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

/// Trainable state: the item embedding table plus encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    kind: EncoderKind,
    catalog_size: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn num_params_for(kind: EncoderKind, catalog_size: usize, dim: usize) -> usize {
        catalog_size * dim + kind.encoder_len(dim)
    }

    /// Uniform initialisation in `[-0.1, 0.1]`.
    pub fn init(kind: EncoderKind, catalog_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::num_params_for(kind, catalog_size, dim);
        let data = (0..n)
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        Self {
            kind,
            catalog_size,
            dim,
            data,
        }
    }

    pub fn from_parts(
        kind: EncoderKind,
        catalog_size: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        let expected = Self::num_params_for(kind, catalog_size, dim);
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameters contain non-finite entries".into()));
        }
        Ok(Self {
            kind,
            catalog_size,
            dim,
            data,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.data[..self.catalog_size * self.dim]
    }

    pub fn embeddings_mut(&mut self) -> &mut [f64] {
        let n = self.catalog_size * self.dim;
        &mut self.data[..n]
    }

    pub fn embedding(&self, item: ItemId) -> &[f64] {
        let d = self.dim;
        &self.data[item.index() * d..(item.index() + 1) * d]
    }

    pub fn embedding_table(&self) -> EmbeddingTable<'_> {
        EmbeddingTable {
            data: self.embeddings(),
            dim: self.dim,
        }
    }

    pub fn encoder_weights(&self) -> &[f64] {
        &self.data[self.catalog_size * self.dim..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Runs the encoder, keeping what the backward pass needs.
    pub fn forward(&self, items: &[ItemId]) -> Result<Forward> {
        validate_items(items, self.catalog_size)?;
        Ok(match self.kind {
            EncoderKind::Gru => gru::forward(self, items),
            EncoderKind::MeanPool => {
                let d = self.dim;
                let mut h = vec![0.0; d];
                for &it in items {
                    for (acc, e) in h.iter_mut().zip(self.embedding(it)) {
                        *acc += e;
                    }
                }
                let inv = 1.0 / items.len() as f64;
                h.iter_mut().for_each(|v| *v *= inv);
                Forward {
                    items: items.to_vec(),
                    h,
                    gru: None,
                }
            }
        })
    }

    /// Relevance of every catalog item: `r_j = <h, e_j>`.
    pub fn relevance_from(&self, h: &[f64]) -> Vec<f64> {
        self.embeddings()
            .chunks_exact(self.dim)
            .map(|e| dot(e, h))
            .collect()
    }

    /// Adds `d loss / d params` for an upstream gradient on the relevance
    /// vector of one forward pass. `extra_dh` is added to the gradient on
    /// the sequence representation before it enters the encoder.
    pub fn accumulate_backward(
        &self,
        fwd: &Forward,
        upstream: &[f64],
        extra_dh: Option<&[f64]>,
        grads: &mut GradientBundle,
    ) -> Result<()> {
        if upstream.len() != self.catalog_size {
            return Err(Error::ShapeMismatch {
                expected: self.catalog_size,
                got: upstream.len(),
            });
        }
        if grads.values.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.data.len(),
                got: grads.values.len(),
            });
        }
        let d = self.dim;
        let mut dh = match extra_dh {
            Some(x) => x.to_vec(),
            None => vec![0.0; d],
        };
        let emb = self.embeddings();
        let demb = &mut grads.values[..self.catalog_size * d];
        for (j, &g) in upstream.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &emb[j * d..(j + 1) * d];
            let grow = &mut demb[j * d..(j + 1) * d];
            for k in 0..d {
                grow[k] += g * fwd.h[k];
                dh[k] += g * row[k];
            }
        }
        self.backward_repr(fwd, &dh, grads);
        Ok(())
    }

    /// Backpropagates a gradient on the sequence representation alone.
    pub fn backward_repr(&self, fwd: &Forward, dh: &[f64], grads: &mut GradientBundle) {
        match self.kind {
            EncoderKind::Gru => gru::backward(self, fwd, dh, grads),
            EncoderKind::MeanPool => {
                let d = self.dim;
                let inv = 1.0 / fwd.items.len() as f64;
                for &it in &fwd.items {
                    let grow = &mut grads.values[it.index() * d..(it.index() + 1) * d];
                    for k in 0..d {
                        grow[k] += dh[k] * inv;
                    }
                }
            }
        }
    }
}

/// Row view over an embedding matrix.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTable<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> EmbeddingTable<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        Self { data, dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, item: ItemId) -> &'a [f64] {
        &self.data[item.index() * self.dim..(item.index() + 1) * self.dim]
    }
}

/// Encoder output with the activations needed for backpropagation.
#[derive(Clone, Debug)]
pub struct Forward {
    pub items: Vec<ItemId>,
    pub h: Vec<f64>,
    gru: Option<gru::Trace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRepr {
    pub h: Vec<f64>,
}

/// Relevance scores and their softmax confidences over the whole catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub relevance: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl ScoreVector {
    pub fn from_relevance(relevance: Vec<f64>) -> Self {
        let confidence = softmax(&relevance);
        Self {
            relevance,
            confidence,
        }
    }

    pub fn len(&self) -> usize {
        self.relevance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevance.is_empty()
    }
}

/// Softmax with max-subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-parameter gradient, shape-congruent with [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub values: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            values: vec![0.0; params.num_params()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn embedding_row_mut(&mut self, item: ItemId, dim: usize) -> &mut [f64] {
        &mut self.values[item.index() * dim..(item.index() + 1) * dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn encode(params: &ModelParams, items: &[ItemId]) -> Result<SequenceRepr> {
    Ok(SequenceRepr {
        h: params.forward(items)?.h,
    })
}

pub fn score_all(params: &ModelParams, h: &SequenceRepr) -> ScoreVector {
    ScoreVector::from_relevance(params.relevance_from(&h.h))
}

/// Gradient of a loss whose derivative w.r.t. the relevance vector of
/// `items` is `upstream`.
pub fn backward(params: &ModelParams, items: &[ItemId], upstream: &[f64]) -> Result<GradientBundle> {
    if upstream.len() != params.catalog_size() {
        return Err(Error::ShapeMismatch {
            expected: params.catalog_size(),
            got: upstream.len(),
        });
    }
    let fwd = params.forward(items)?;
    let mut grads = GradientBundle::zeros_like(params);
    params.accumulate_backward(&fwd, upstream, None, &mut grads)?;
    Ok(grads)
}

/// Anything that can assign a relevance score to every catalog item given a
/// user's history.
pub trait Scorer: Sync {
    fn catalog_size(&self) -> usize;

    fn relevance(&self, items: &[ItemId]) -> Result<Vec<f64>>;

    fn scores(&self, items: &[ItemId]) -> Result<ScoreVector> {
        Ok(ScoreVector::from_relevance(self.relevance(items)?))
    }
}

impl Scorer for ModelParams {
    fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    fn relevance(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        let fwd = self.forward(items)?;
        Ok(self.relevance_from(&fwd.h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn mean_pool_identities() {
        let p = ModelParams::init(EncoderKind::MeanPool, 5, 4, 3);
        let h = encode(&p, &ids(&[2])).unwrap();
        assert_eq!(h.h, p.embedding(ItemId(2)));
        let h2 = encode(&p, &ids(&[2, 2])).unwrap();
        for (a, b) in h2.h.iter().zip(p.embedding(ItemId(2))) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_one_two_three() {
        let s = ScoreVector::from_relevance(vec![1.0, 2.0, 3.0]);
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in s.confidence.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_embeddings_give_uniform_confidence() {
        let mut p = ModelParams::init(EncoderKind::MeanPool, 6, 3, 1);
        let row = p.embedding(ItemId(0)).to_vec();
        for j in 0..6 {
            p.embeddings_mut()[j * 3..(j + 1) * 3].copy_from_slice(&row);
        }
        let s = p.scores(&ids(&[1, 4])).unwrap();
        for c in s.confidence {
            assert!((c - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_h_gives_uniform() {
        let p = ModelParams::init(EncoderKind::MeanPool, 4, 3, 1);
        let s = score_all(&p, &SequenceRepr { h: vec![0.0; 3] });
        assert!(s.relevance.iter().all(|&r| r == 0.0));
        assert!(s.confidence.iter().all(|&c| (c - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        for kind in [EncoderKind::Gru, EncoderKind::MeanPool] {
            let p = ModelParams::init(kind, 7, 4, 9);
            let g = backward(&p, &ids(&[1, 3, 5]), &[0.0; 7]).unwrap();
            assert!(g.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_hot_upstream_mean_pool() {
        // r_j = <mean(e_a, e_b), e_j>; d r_j / d e_j includes h and every
        // pooled embedding receives e_j / T.
        let p = ModelParams::init(EncoderKind::MeanPool, 5, 3, 11);
        let (a, b, j) = (0usize, 1usize, 3usize);
        let mut up = vec![0.0; 5];
        up[j] = 1.0;
        let g = backward(&p, &ids(&[a as u32, b as u32]), &up).unwrap();
        let h = encode(&p, &ids(&[a as u32, b as u32])).unwrap().h;
        let ej = p.embedding(ItemId(j as u32));
        for k in 0..3 {
            assert!((g.values[j * 3 + k] - h[k]).abs() < 1e-15);
            assert!((g.values[a * 3 + k] - ej[k] / 2.0).abs() < 1e-15);
            assert!((g.values[b * 3 + k] - ej[k] / 2.0).abs() < 1e-15);
        }
        assert!(g.values[2 * 3..3 * 3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let p = ModelParams::init(EncoderKind::Gru, 5, 2, 0);
        assert!(matches!(
            backward(&p, &ids(&[1]), &[0.0; 4]),
            Err(Error::ShapeMismatch { expected: 5, got: 4 })
        ));
        assert!(matches!(
            encode(&p, &ids(&[9])),
            Err(Error::OutOfCatalog { item: 9, position: 0 })
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::init(EncoderKind::Gru, 10, 4, 5);
        let b = ModelParams::init(EncoderKind::Gru, 10, 4, 5);
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.abs() <= 0.1));
        assert_eq!(a.num_params(), 10 * 4 + 6 * 16 + 3 * 4);
    }
}
