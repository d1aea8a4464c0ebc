//! Layer primitives with explicit hand-derived backward passes.
//!
//! The two model pipelines are fixed, so no general autodiff is used: each
//! primitive exposes a forward and a matching adjoint, and the model code
//! chains them by hand. Reductions longer than [`LONG_SUM_THRESHOLD`] terms
//! accumulate in f64 before being stored back as f32, so that long-sequence
//! sums stay stable enough for the dense/low-memory equivalence tolerances.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reductions with more terms than this switch to f64 partial sums.
pub const LONG_SUM_THRESHOLD: usize = 4096;

/// Deterministic 8-lane dot product. The summation order is fixed, so every
/// call site (dense path, chunk scan, region recompute) produces bitwise
/// identical results for identical operands.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let n8 = a.len() / 8 * 8;
    let mut i = 0;
    while i < n8 {
        for j in 0..8 {
            acc[j] += a[i + j] * b[i + j];
        }
        i += 8;
    }
    let mut tail = 0.0f32;
    for k in n8..a.len() {
        tail += a[k] * b[k];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

fn dot_f64(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let n8 = a.len() / 8 * 8;
    let mut i = 0;
    while i < n8 {
        for j in 0..8 {
            acc[j] += a[i + j] as f64 * b[i + j] as f64;
        }
        i += 8;
    }
    let mut tail = 0.0f64;
    for k in n8..a.len() {
        tail += a[k] as f64 * b[k] as f64;
    }
    ((((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail)
        as f32
}

/// Dot product that upgrades to f64 accumulation past the long-sum threshold.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    if a.len() > LONG_SUM_THRESHOLD {
        dot_f64(a, b)
    } else {
        dot_f32(a, b)
    }
}

pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

/// Token embedding table. Rows listed in `frozen_zero_rows` are pinned to
/// zero: they receive no gradient and are skipped by the optimizer, so a PAD
/// token stays inert for the life of the model.
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: Tensor,
    pub grad: Tensor,
    pub frozen_zero_rows: BTreeSet<usize>,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(
        vocab_size: usize,
        dim: usize,
        frozen_zero_rows: BTreeSet<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size < 257 {
            return Err(Error::Config(format!(
                "embedding vocab size {vocab_size} < 257"
            )));
        }
        let mut weights = Tensor::zeros(&[vocab_size, dim]);
        for v in weights.data_mut() {
            *v = StandardNormal.sample(rng);
        }
        for &r in &frozen_zero_rows {
            weights.row_mut(r).fill(0.0);
        }
        Ok(EmbeddingTable {
            vocab_size,
            dim,
            grad: Tensor::zeros(&[vocab_size, dim]),
            weights,
            frozen_zero_rows,
        })
    }

    pub fn embed(&self, tokens: &[u16]) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[tokens.len(), self.dim]);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: tok as u32,
                    vocab: self.vocab_size,
                });
            }
            out.row_mut(t).copy_from_slice(self.weights.row(tok as usize));
        }
        Ok(out)
    }

    /// Accumulate output gradients into the table rows, skipping frozen rows.
    pub fn embed_backward(&mut self, tokens: &[u16], dy: &Tensor) {
        debug_assert_eq!(dy.rows(), tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let r = tok as usize;
            if self.frozen_zero_rows.contains(&r) {
                continue;
            }
            let src = dy.row(t);
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            axpy(self.grad.row_mut(r), 1.0, src);
        }
    }
}

// ---------------------------------------------------------------------------
// 1-D convolution
// ---------------------------------------------------------------------------

/// Strided 1-D convolution layer over a `[T x C_in]` sequence.
///
/// Weights are stored `[out][in][k]`; forward passes repack them `[out][k][in]`
/// so each output element is one contiguous dot product against the input
/// window.
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
}

impl Conv1dLayer {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel_width: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if stride == 0 || stride > kernel_width {
            return Err(Error::Config(format!(
                "conv stride {stride} must be in [1, kernel width {kernel_width}]"
            )));
        }
        let fan_in = in_channels * kernel_width;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut weights = Tensor::zeros(&[out_channels, in_channels, kernel_width]);
        for v in weights.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let mut bias = Tensor::zeros(&[out_channels]);
        for v in bias.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Ok(Conv1dLayer {
            in_channels,
            out_channels,
            kernel_width,
            stride,
            grad_weights: Tensor::zeros(&[out_channels, in_channels, kernel_width]),
            grad_bias: Tensor::zeros(&[out_channels]),
            weights,
            bias,
        })
    }

    /// `floor((T - W)/S) + 1`, defined only for `T >= W`.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        output_len(input_len, self.kernel_width, self.stride)
    }

    pub fn packed(&self) -> PackedConv {
        // [out][k][in] layout
        let cin = self.in_channels;
        let kw = self.kernel_width;
        let mut w = vec![0.0f32; self.out_channels * kw * cin];
        for o in 0..self.out_channels {
            for c in 0..cin {
                for k in 0..kw {
                    w[o * kw * cin + k * cin + c] =
                        self.weights.data()[o * cin * kw + c * kw + k];
                }
            }
        }
        PackedConv {
            in_channels: cin,
            out_channels: self.out_channels,
            kernel_width: kw,
            stride: self.stride,
            w,
            bias: self.bias.data().to_vec(),
        }
    }
}

pub fn output_len(input_len: usize, kernel_width: usize, stride: usize) -> Option<usize> {
    if input_len < kernel_width {
        None
    } else {
        Some((input_len - kernel_width) / stride + 1)
    }
}

/// Convolution weights repacked for contiguous window dot products.
pub struct PackedConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    w: Vec<f32>,
    bias: Vec<f32>,
}

impl PackedConv {
    fn filter(&self, o: usize) -> &[f32] {
        let kc = self.kernel_width * self.in_channels;
        &self.w[o * kc..(o + 1) * kc]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv input has {} channels, layer expects {}",
                x.cols(),
                self.in_channels
            )));
        }
        let t = x.rows();
        let l = output_len(t, self.kernel_width, self.stride).ok_or(Error::InputTooShort {
            len: t,
            min: self.kernel_width,
        })?;
        let kc = self.kernel_width * self.in_channels;
        let xs = x.data();
        let mut out = Tensor::zeros(&[l, self.out_channels]);
        for li in 0..l {
            let win = &xs[li * self.stride * self.in_channels..][..kc];
            let row = out.row_mut(li);
            for o in 0..self.out_channels {
                row[o] = self.bias[o] + dot(win, self.filter(o));
            }
        }
        Ok(out)
    }
}

/// Convolution adjoint: accumulates weight/bias gradients into the layer and
/// returns the input gradient. Zero rows of `dy` are skipped, which keeps the
/// accumulation order identical between the full dense pass (sparse `dy`) and
/// the per-region low-memory pass.
pub fn conv1d_backward(layer: &mut Conv1dLayer, dy: &Tensor, x: &Tensor) -> Result<Tensor> {
    let l = layer.output_len(x.rows()).ok_or(Error::InputTooShort {
        len: x.rows(),
        min: layer.kernel_width,
    })?;
    if dy.rows() != l || dy.cols() != layer.out_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv dY shape {:?}, expected [{l} x {}]",
            dy.shape(),
            layer.out_channels
        )));
    }
    let packed = layer.packed();
    let cin = layer.in_channels;
    let kw = layer.kernel_width;
    let kc = kw * cin;
    let mut dw_packed = vec![0.0f32; layer.out_channels * kc];
    let mut dbias = vec![0.0f64; layer.out_channels];
    let mut dx = Tensor::zeros(&[x.rows(), cin]);
    let xs = x.data();
    for li in 0..l {
        let dy_row = dy.row(li);
        let base = li * layer.stride * cin;
        let win = &xs[base..base + kc];
        for o in 0..layer.out_channels {
            let g = dy_row[o];
            if g == 0.0 {
                continue;
            }
            dbias[o] += g as f64;
            axpy(&mut dw_packed[o * kc..(o + 1) * kc], g, win);
            axpy(&mut dx.data_mut()[base..base + kc], g, packed.filter(o));
        }
    }
    for o in 0..layer.out_channels {
        layer.grad_bias.data_mut()[o] += dbias[o] as f32;
        for c in 0..cin {
            for k in 0..kw {
                layer.grad_weights.data_mut()[o * cin * kw + c * kw + k] +=
                    dw_packed[o * kc + k * cin + c];
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// GLU gate
// ---------------------------------------------------------------------------

/// `out = A * sigmoid(B)`, elementwise.
pub fn glu_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "glu inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    for ((y, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *y = av * sigmoid(bv);
    }
    Ok(out)
}

/// Adjoint of [`glu_forward`]: `dA = dOut * s`, `dB = dOut * A * s * (1 - s)`.
pub fn glu_backward(dy: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if !dy.same_shape(a) || !a.same_shape(b) {
        return Err(Error::ShapeMismatch("glu backward shapes".to_string()));
    }
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for i in 0..dy.len() {
        let s = sigmoid(b.data()[i]);
        let g = dy.data()[i];
        da.data_mut()[i] = g * s;
        db.data_mut()[i] = g * a.data()[i] * s * (1.0 - s);
    }
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// Temporal max pooling
// ---------------------------------------------------------------------------

/// Global max over the time axis per channel. Ties break to the lowest index,
/// which makes the dense and fixed-memory paths pick identical winners.
pub fn temporal_max_pool(x: &Tensor) -> Result<(Vec<f32>, Vec<usize>)> {
    let l = x.rows();
    let c = x.cols();
    if l == 0 {
        return Err(Error::InputTooShort { len: 0, min: 1 });
    }
    let mut values = x.row(0).to_vec();
    let mut indices = vec![0usize; c];
    for li in 1..l {
        let row = x.row(li);
        for ch in 0..c {
            if row[ch] > values[ch] {
                values[ch] = row[ch];
                indices[ch] = li;
            }
        }
    }
    Ok((values, indices))
}

/// Sparse pooling adjoint: each channel's gradient lands on exactly one row.
pub fn temporal_max_pool_backward(
    d_values: &[f32],
    indices: &[usize],
    rows: usize,
) -> Tensor {
    let c = d_values.len();
    let mut dx = Tensor::zeros(&[rows, c]);
    for ch in 0..c {
        dx.row_mut(indices[ch])[ch] += d_values[ch];
    }
    dx
}

// ---------------------------------------------------------------------------
// Linear / ReLU / loss
// ---------------------------------------------------------------------------

pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
}

impl LinearLayer {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut weights = Tensor::zeros(&[out_dim, in_dim]);
        for v in weights.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let mut bias = Tensor::zeros(&[out_dim]);
        for v in bias.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        LinearLayer {
            in_dim,
            out_dim,
            grad_weights: Tensor::zeros(&[out_dim, in_dim]),
            grad_bias: Tensor::zeros(&[out_dim]),
            weights,
            bias,
        }
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear input {} vs in_dim {}",
                x.len(),
                self.in_dim
            )));
        }
        Ok((0..self.out_dim)
            .map(|o| self.bias.data()[o] + dot(x, self.weights.row(o)))
            .collect())
    }

    /// Accumulates weight/bias gradients, returns dX.
    pub fn backward(&mut self, dy: &[f32], x: &[f32]) -> Result<Vec<f32>> {
        if dy.len() != self.out_dim || x.len() != self.in_dim {
            return Err(Error::ShapeMismatch("linear backward shapes".to_string()));
        }
        let mut dx = vec![0.0f32; self.in_dim];
        for o in 0..self.out_dim {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            self.grad_bias.data_mut()[o] += g;
            axpy(self.grad_weights.row_mut(o), g, x);
            axpy(&mut dx, g, self.weights.row(o));
        }
        Ok(dx)
    }
}

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(dy: &[f32], x: &[f32]) -> Vec<f32> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Binary cross-entropy on a single logit, computed in the stable branch
/// form. Returns `(loss, dLoss/dLogit)`.
pub fn bce_with_logits(logit: f32, label: u8) -> (f32, f32) {
    debug_assert!(label <= 1);
    let x = logit as f64;
    let y = label as f64;
    let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    let d = sigmoid_f64(x) - y;
    (loss as f32, d as f32)
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn embed_frozen_row_is_zero() {
        let frozen: BTreeSet<usize> = [257].into_iter().collect();
        let table = EmbeddingTable::new(258, 8, frozen, &mut rng(1)).unwrap();
        let out = table.embed(&[257]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_lookup_is_deterministic() {
        let table = EmbeddingTable::new(258, 8, BTreeSet::new(), &mut rng(2)).unwrap();
        let out = table.embed(&[5, 5]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), table.weights.row(5));
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let table = EmbeddingTable::new(258, 8, BTreeSet::new(), &mut rng(3)).unwrap();
        assert!(matches!(
            table.embed(&[300]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let c = 3;
        let mut layer = Conv1dLayer::new(c, c, 1, 1, &mut rng(4)).unwrap();
        layer.weights.fill(0.0);
        layer.bias.fill(0.0);
        for o in 0..c {
            layer.weights.data_mut()[o * c + o] = 1.0;
        }
        let x = Tensor::from_vec(&[4, c], (0..12).map(|v| v as f32).collect());
        let y = layer.packed().forward(&x).unwrap();
        assert_eq!(y.data(), x.data());

        // W=1, S=1 identity: dX == dY
        let dy = Tensor::from_vec(&[4, c], (0..12).map(|v| (v * 2) as f32).collect());
        let dx = conv1d_backward(&mut layer, &dy, &x).unwrap();
        assert_eq!(dx.data(), dy.data());
    }

    #[test]
    fn conv_length_formula() {
        assert_eq!(output_len(2_000_000, 512, 512), Some(3906));
        assert_eq!(output_len(511, 512, 512), None);
        assert_eq!(output_len(512, 512, 512), Some(1));
    }

    #[test]
    fn conv_backward_zero_dy_gives_zero_grads() {
        let mut layer = Conv1dLayer::new(2, 3, 4, 2, &mut rng(5)).unwrap();
        let x = Tensor::from_vec(&[10, 2], (0..20).map(|v| v as f32 * 0.1).collect());
        let l = layer.output_len(10).unwrap();
        let dy = Tensor::zeros(&[l, 3]);
        let dx = conv1d_backward(&mut layer, &dy, &x).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(layer.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(layer.grad_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glu_zero_gate_halves() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::zeros(&[2, 2]);
        let y = glu_forward(&a, &b).unwrap();
        assert_eq!(y.data(), &[0.5, 1.0, 1.5, 2.0]);
        let zero = Tensor::zeros(&[2, 2]);
        let y2 = glu_forward(&zero, &b).unwrap();
        assert!(y2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_tie_breaks_to_lowest_index() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0; 6]);
        let (vals, idx) = temporal_max_pool(&x).unwrap();
        assert_eq!(vals, vec![1.0, 1.0]);
        assert_eq!(idx, vec![0, 0]);
    }

    #[test]
    fn pool_single_row() {
        let x = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]);
        let (vals, idx) = temporal_max_pool(&x).unwrap();
        assert_eq!(vals, vec![0.5, -1.0, 2.0]);
        assert_eq!(idx, vec![0, 0, 0]);
    }

    #[test]
    fn pool_backward_is_sparse() {
        let dx = temporal_max_pool_backward(&[1.0, 2.0, 3.0], &[4, 0, 2], 6);
        let nonzero = dx.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 3);
        assert_eq!(dx.row(4)[0], 1.0);
        assert_eq!(dx.row(0)[1], 2.0);
        assert_eq!(dx.row(2)[2], 3.0);
    }

    #[test]
    fn linear_zero_weights_yields_bias() {
        let mut layer = LinearLayer::new(3, 2, &mut rng(6));
        layer.weights.fill(0.0);
        layer.bias.data_mut().copy_from_slice(&[0.25, -0.5]);
        let y = layer.forward(&[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(y, vec![0.25, -0.5]);
    }

    #[test]
    fn bce_at_zero_logit() {
        let (loss1, d1) = bce_with_logits(0.0, 1);
        let (loss0, d0) = bce_with_logits(0.0, 0);
        assert!((loss1 - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((loss0 - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((d1 + 0.5).abs() < 1e-6);
        assert!((d0 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bce_saturated_logit_does_not_overflow() {
        let (loss, d) = bce_with_logits(40.0, 1);
        assert!(loss.is_finite() && loss < 1e-10);
        assert!(d.abs() < 1e-10);
        let (loss, _) = bce_with_logits(-40.0, 0);
        assert!(loss.is_finite() && loss < 1e-10);
    }
}
