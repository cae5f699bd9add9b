//! Gated recurrent cell, zero initial state, last-position readout.
//!
//! ```text
//! z = sigmoid(Wz x + Uz h + bz)
//! r = sigmoid(Wr x + Ur h + br)
//! n = tanh(Wn x + Un (r * h) + bn)
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Weight layout after the embedding table: Wz, Wr, Wn, Uz, Ur, Un (each
//! d x d, row-major, output-major) then bz, br, bn.

use super::{dot, Forward, GradientBundle, ModelParams};
use crate::types::ItemId;

pub(super) fn param_len(d: usize) -> usize {
    6 * d * d + 3 * d
}

#[derive(Clone, Copy)]
struct Offsets {
    wz: usize,
    wr: usize,
    wn: usize,
    uz: usize,
    ur: usize,
    un: usize,
    bz: usize,
    br: usize,
    bn: usize,
}

impl Offsets {
    fn new(base: usize, d: usize) -> Self {
        let dd = d * d;
        Self {
            wz: base,
            wr: base + dd,
            wn: base + 2 * dd,
            uz: base + 3 * dd,
            ur: base + 4 * dd,
            un: base + 5 * dd,
            bz: base + 6 * dd,
            br: base + 6 * dd + d,
            bn: base + 6 * dd + 2 * d,
        }
    }
}

/// Per-step activations, flattened step-major (`steps * d`).
#[derive(Clone, Debug)]
pub(super) struct Trace {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += dot(&w[i * d..(i + 1) * d], x);
    }
}

/// out += W^T a
#[inline]
fn matvec_t_add(w: &[f64], a: &[f64], out: &mut [f64]) {
    let d = out.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &w[i * d..(i + 1) * d];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += ai * wv;
        }
    }
}

/// G += a b^T
#[inline]
fn outer_add(g: &mut [f64], a: &[f64], b: &[f64]) {
    let d = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut g[i * d..(i + 1) * d];
        for (gv, bv) in row.iter_mut().zip(b) {
            *gv += ai * bv;
        }
    }
}

pub(super) fn forward(params: &ModelParams, items: &[ItemId]) -> Forward {
    let d = params.dim();
    let p = params.as_slice();
    let o = Offsets::new(params.catalog_size() * d, d);
    let steps = items.len();
    let mut trace = Trace {
        h_prev: Vec::with_capacity(steps * d),
        z: Vec::with_capacity(steps * d),
        r: Vec::with_capacity(steps * d),
        n: Vec::with_capacity(steps * d),
    };
    let mut h = vec![0.0; d];
    let mut az = vec![0.0; d];
    let mut ar = vec![0.0; d];
    let mut an = vec![0.0; d];
    let mut rh = vec![0.0; d];
    for &it in items {
        let x = params.embedding(it);
        az.copy_from_slice(&p[o.bz..o.bz + d]);
        ar.copy_from_slice(&p[o.br..o.br + d]);
        an.copy_from_slice(&p[o.bn..o.bn + d]);
        matvec_add(&p[o.wz..o.wz + d * d], x, &mut az);
        matvec_add(&p[o.uz..o.uz + d * d], &h, &mut az);
        matvec_add(&p[o.wr..o.wr + d * d], x, &mut ar);
        matvec_add(&p[o.ur..o.ur + d * d], &h, &mut ar);
        for k in 0..d {
            az[k] = sigmoid(az[k]);
            ar[k] = sigmoid(ar[k]);
            rh[k] = ar[k] * h[k];
        }
        matvec_add(&p[o.wn..o.wn + d * d], x, &mut an);
        matvec_add(&p[o.un..o.un + d * d], &rh, &mut an);
        trace.h_prev.extend_from_slice(&h);
        for k in 0..d {
            an[k] = an[k].tanh();
            h[k] = (1.0 - az[k]) * an[k] + az[k] * h[k];
        }
        trace.z.extend_from_slice(&az);
        trace.r.extend_from_slice(&ar);
        trace.n.extend_from_slice(&an);
    }
    Forward {
        items: items.to_vec(),
        h,
        gru: Some(trace),
    }
}

pub(super) fn backward(params: &ModelParams, fwd: &Forward, dh_out: &[f64], grads: &mut GradientBundle) {
    let d = params.dim();
    let p = params.as_slice();
    let o = Offsets::new(params.catalog_size() * d, d);
    let trace = fwd.gru.as_ref().expect("gru forward trace");
    let g = &mut grads.values;

    let mut dh = dh_out.to_vec();
    let mut dh_prev = vec![0.0; d];
    let mut daz = vec![0.0; d];
    let mut dar = vec![0.0; d];
    let mut dan = vec![0.0; d];
    let mut drh = vec![0.0; d];
    let mut rh = vec![0.0; d];
    let mut dx = vec![0.0; d];

    for (t, &it) in fwd.items.iter().enumerate().rev() {
        let span = t * d..(t + 1) * d;
        let hp = &trace.h_prev[span.clone()];
        let z = &trace.z[span.clone()];
        let r = &trace.r[span.clone()];
        let n = &trace.n[span];
        let x = params.embedding(it);

        for k in 0..d {
            let dz = dh[k] * (hp[k] - n[k]);
            let dn = dh[k] * (1.0 - z[k]);
            dh_prev[k] = dh[k] * z[k];
            dan[k] = dn * (1.0 - n[k] * n[k]);
            daz[k] = dz * z[k] * (1.0 - z[k]);
            rh[k] = r[k] * hp[k];
        }

        // candidate branch
        outer_add(&mut g[o.wn..o.wn + d * d], &dan, x);
        outer_add(&mut g[o.un..o.un + d * d], &dan, &rh);
        for k in 0..d {
            g[o.bn + k] += dan[k];
        }
        dx.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(&p[o.wn..o.wn + d * d], &dan, &mut dx);
        drh.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(&p[o.un..o.un + d * d], &dan, &mut drh);
        for k in 0..d {
            dh_prev[k] += drh[k] * r[k];
            dar[k] = drh[k] * hp[k] * r[k] * (1.0 - r[k]);
        }

        // reset gate
        outer_add(&mut g[o.wr..o.wr + d * d], &dar, x);
        outer_add(&mut g[o.ur..o.ur + d * d], &dar, hp);
        for k in 0..d {
            g[o.br + k] += dar[k];
        }
        matvec_t_add(&p[o.wr..o.wr + d * d], &dar, &mut dx);
        matvec_t_add(&p[o.ur..o.ur + d * d], &dar, &mut dh_prev);

        // update gate
        outer_add(&mut g[o.wz..o.wz + d * d], &daz, x);
        outer_add(&mut g[o.uz..o.uz + d * d], &daz, hp);
        for k in 0..d {
            g[o.bz + k] += daz[k];
        }
        matvec_t_add(&p[o.wz..o.wz + d * d], &daz, &mut dx);
        matvec_t_add(&p[o.uz..o.uz + d * d], &daz, &mut dh_prev);

        let row = &mut g[it.index() * d..(it.index() + 1) * d];
        for k in 0..d {
            row[k] += dx[k];
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
}
