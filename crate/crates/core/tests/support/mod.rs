//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cpft::model::{EncoderKind, ModelParams};
use cpft::ItemId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;

pub struct Instance {
    pub params: ModelParams,
    pub seqs: Vec<Vec<ItemId>>,
    pub targets: Vec<ItemId>,
}

/// Random model (|V| <= 12, d <= 8, weights in [-1, 1]) with a handful of
/// random sequences and targets.
pub fn instance(seed: u64, kind: EncoderKind) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = rng.random_range(5..=12usize);
    let d = rng.random_range(2..=8usize);
    let n = ModelParams::num_params_for(kind, v, d);
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = ModelParams::from_parts(kind, v, d, data).unwrap();
    let users = rng.random_range(3..=6usize);
    let seqs: Vec<Vec<ItemId>> = (0..users)
        .map(|_| {
            let len = rng.random_range(3..=6usize);
            (0..len).map(|_| ItemId::from(rng.random_range(0..v))).collect()
        })
        .collect();
    let targets = (0..users).map(|_| ItemId::from(rng.random_range(0..v))).collect();
    Instance { params, seqs, targets }
}

/// Central differences over every parameter.
pub fn numeric_grad(params: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.num_params())
        .map(|i| {
            let orig = p.as_slice()[i];
            p.as_mut_slice()[i] = orig + STEP;
            let up = f(&p);
            p.as_mut_slice()[i] = orig - STEP;
            let down = f(&p);
            p.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the L2 norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}
