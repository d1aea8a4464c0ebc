//! Shared test oracles: straightforward f64 reference implementations of
//! every layer, written as plain loops with no shared code with the crate,
//! plus finite-difference helpers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-3)
}

pub const FD_H: f64 = 1e-4;

/// Central difference of `f` with respect to one scalar.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_H) - f(x - FD_H)) / (2.0 * FD_H)
}

// ---------------------------------------------------------------------------
// f64 reference layers. All matrices are row-major flat slices.
// ---------------------------------------------------------------------------

/// Embedding lookup: `table` is [vocab x dim], output [t x dim].
pub fn ref_embed(table: &[f64], dim: usize, tokens: &[u16]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tokens.len() * dim);
    for &tok in tokens {
        let r = tok as usize * dim;
        out.extend_from_slice(&table[r..r + dim]);
    }
    out
}

/// 1-D convolution over [t x c_in] input with [o][c][k] weights.
/// Returns [l x o] with l = (t - k)/stride + 1.
pub fn ref_conv1d(
    w: &[f64],
    bias: &[f64],
    out_ch: usize,
    in_ch: usize,
    kw: usize,
    stride: usize,
    x: &[f64],
    t: usize,
) -> Vec<f64> {
    assert_eq!(x.len(), t * in_ch);
    assert!(t >= kw);
    let l = (t - kw) / stride + 1;
    let mut y = vec![0.0; l * out_ch];
    for li in 0..l {
        for o in 0..out_ch {
            let mut acc = bias[o];
            for c in 0..in_ch {
                for k in 0..kw {
                    acc += w[(o * in_ch + c) * kw + k] * x[(li * stride + k) * in_ch + c];
                }
            }
            y[li * out_ch + o] = acc;
        }
    }
    y
}

pub fn ref_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GLU: elementwise a * sigmoid(b).
pub fn ref_glu(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(&a, &b)| a * ref_sigmoid(b)).collect()
}

pub fn ref_relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Per-row scalar gating: y_t = x_t * sigmoid(x_t . z) for [t x c] input.
pub fn ref_gcg(x: &[f64], t: usize, c: usize, z: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; t * c];
    for ti in 0..t {
        let row = &x[ti * c..(ti + 1) * c];
        let s = ref_sigmoid(row.iter().zip(z).map(|(&a, &b)| a * b).sum());
        for (o, &v) in y[ti * c..(ti + 1) * c].iter_mut().zip(row) {
            *o = s * v;
        }
    }
    y
}

/// Context projection z = tanh(W' g) for a [c x c] matrix.
pub fn ref_context(w: &[f64], c: usize, g: &[f64]) -> Vec<f64> {
    (0..c)
        .map(|j| (0..c).map(|i| w[i * c + j] * g[i]).sum::<f64>().tanh())
        .collect()
}

/// Linear layer y = W x + b for a [out x in] matrix.
pub fn ref_linear(w: &[f64], b: &[f64], out_dim: usize, in_dim: usize, x: &[f64]) -> Vec<f64> {
    (0..out_dim)
        .map(|o| {
            b[o] + (0..in_dim)
                .map(|i| w[o * in_dim + i] * x[i])
                .sum::<f64>()
        })
        .collect()
}

/// Numerically stable binary cross-entropy with logits.
pub fn ref_bce(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (1.0 + (-logit.abs()).exp()).ln()
}

/// Per-channel max over time of a [t x c] matrix, lowest index on ties.
pub fn ref_max_pool(x: &[f64], t: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let mut vals = vec![f64::NEG_INFINITY; c];
    let mut idx = vec![0usize; c];
    for ti in 0..t {
        for ci in 0..c {
            let v = x[ti * c + ci];
            if v > vals[ci] {
                vals[ci] = v;
                idx[ci] = ti;
            }
        }
    }
    (vals, idx)
}

pub mod gradchecks;
