//! Global channel gating: per-time-step scalar gating of a C-channel
//! sequence by a learned global context.
//!
//! Given features `x_t` and a context vector `g`, each time step is scaled by
//! `s_t = sigmoid(x_t . tanh(W' g))`. The projected context
//! `z = tanh(W' g)` is computed once per sample and reused everywhere the
//! gate is evaluated (no-grad winner scan and grad-tracked recompute), so the
//! scanned argmax always matches the recomputed gated activations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sigmoid};
use crate::tensor::Tensor;

/// The learned `[C x C]` projection applied to the context vector.
pub struct GcgParams {
    pub dim: usize,
    pub w: Tensor,
    pub grad: Tensor,
}

impl GcgParams {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut w = Tensor::zeros(&[dim, dim]);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        GcgParams {
            dim,
            grad: Tensor::zeros(&[dim, dim]),
            w,
        }
    }

    /// `z = tanh(W' g)`.
    pub fn context(&self, g: &[f32]) -> Result<Vec<f32>> {
        if g.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "gcg context dim {} vs {}",
                g.len(),
                self.dim
            )));
        }
        let c = self.dim;
        let wd = self.w.data();
        let mut z = vec![0.0f32; c];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for i in 0..c {
                acc += wd[i * c + j] * g[i];
            }
            *zj = acc.tanh();
        }
        Ok(z)
    }
}

/// Gate values for each row of `x`: `s_t = sigmoid(x_t . z)`.
pub fn gate_values(x: &Tensor, z: &[f32]) -> Result<Vec<f32>> {
    if x.cols() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "gcg features have {} channels, context has {}",
            x.cols(),
            z.len()
        )));
    }
    Ok((0..x.rows()).map(|t| sigmoid(dot(x.row(t), z))).collect())
}

/// `y_t = s_t * x_t` with `s` from [`gate_values`].
pub fn gcg_forward(x: &Tensor, z: &[f32]) -> Result<(Tensor, Vec<f32>)> {
    let s = gate_values(x, z)?;
    let mut y = Tensor::zeros(x.shape());
    for t in 0..x.rows() {
        let st = s[t];
        for (yo, &xi) in y.row_mut(t).iter_mut().zip(x.row(t)) {
            *yo = st * xi;
        }
    }
    Ok((y, s))
}

/// Partial adjoint of the gate applied over one sequence segment.
///
/// With `a_t = (dy_t . x_t) * s_t * (1 - s_t)`:
///   `dX_t  = s_t * dy_t + a_t * z`
///   `dz   += sum_t a_t * x_t`  (f64 accumulation; zero rows contribute 0
///            exactly, so summing only a subset of rows with nonzero `dy`
///            matches the full-sequence sum bitwise)
pub fn gcg_backward_segment(
    dy: &Tensor,
    x: &Tensor,
    z: &[f32],
    s: &[f32],
    dz_acc: &mut [f64],
) -> Result<Tensor> {
    if !dy.same_shape(x) || x.cols() != z.len() || s.len() != x.rows() {
        return Err(Error::ShapeMismatch("gcg backward shapes".to_string()));
    }
    let mut dx = Tensor::zeros(x.shape());
    for t in 0..x.rows() {
        let st = s[t];
        let dy_row = dy.row(t);
        let x_row = x.row(t);
        let a = dot(dy_row, x_row) * st * (1.0 - st);
        let dx_row = dx.row_mut(t);
        if a == 0.0 && dy_row.iter().all(|&v| v == 0.0) {
            continue;
        }
        for c in 0..x_row.len() {
            dx_row[c] = st * dy_row[c] + a * z[c];
            dz_acc[c] += (a * x_row[c]) as f64;
        }
    }
    Ok(dx)
}

/// Finish the context-side adjoint once all segments contributed to `dz_acc`:
/// `dg = W ((1 - z^2) . dz)` and `dW += g x ((1 - z^2) . dz)`.
pub fn gcg_finish_backward(
    params: &mut GcgParams,
    g: &[f32],
    z: &[f32],
    dz_acc: &[f64],
) -> Result<Vec<f32>> {
    let c = params.dim;
    if g.len() != c || z.len() != c || dz_acc.len() != c {
        return Err(Error::ShapeMismatch("gcg finish shapes".to_string()));
    }
    let dzt: Vec<f32> = (0..c)
        .map(|j| (1.0 - z[j] * z[j]) * dz_acc[j] as f32)
        .collect();
    let wd = params.w.data();
    let mut dg = vec![0.0f32; c];
    for (i, dgi) in dg.iter_mut().enumerate() {
        *dgi = dot(&wd[i * c..(i + 1) * c], &dzt);
    }
    for i in 0..c {
        axpy(params.grad.row_mut(i), g[i], &dzt);
    }
    Ok(dg)
}
