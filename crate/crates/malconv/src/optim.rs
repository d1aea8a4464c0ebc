//! AdamW with decoupled weight decay.
//!
//! Moments are stored in f32 but every per-element update is evaluated in
//! f64 so repeated runs and both execution paths produce identical
//! parameters. Frozen embedding rows are skipped entirely, including the
//! decay term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// First/second moments per parameter, in visit order.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Apply one update from the gradients currently held by `model`.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        let moments = &mut self.moments;
        model.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            if moments.len() == idx {
                moments.push((
                    p.name.to_string(),
                    Tensor::zeros(p.value.shape()),
                    Tensor::zeros(p.value.shape()),
                ));
            }
            let (name, m, v) = &mut moments[idx];
            idx += 1;
            if name != p.name || m.shape() != p.value.shape() {
                err = Some(Error::Config(format!(
                    "optimizer state mismatch at {}: expected {name}",
                    p.name
                )));
                return;
            }
            let skip: Vec<std::ops::Range<usize>> = match p.frozen_rows {
                Some((rows, dim)) => rows.iter().map(|&r| r * dim..(r + 1) * dim).collect(),
                None => Vec::new(),
            };
            let mut skip_it = skip.iter().peekable();
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            let mut i = 0;
            while i < value.len() {
                if let Some(r) = skip_it.peek() {
                    if r.start == i {
                        i = r.end;
                        skip_it.next();
                        continue;
                    }
                }
                let g = grad[i] as f64;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p64 = value[i] as f64;
                value[i] =
                    (p64 - c.lr * m_hat / (v_hat.sqrt() + c.eps) - c.lr * c.weight_decay * p64)
                        as f32;
                i += 1;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, Mode, ModelConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            arch: Arch::Malconv,
            embed_dim: 4,
            channels: 32,
            kernel_width: 8,
            stride: 4,
            context_glu: true,
            head_hidden: None,
        }
    }

    #[test]
    fn weight_decay_shrinks_params_with_zero_grads() {
        let mut model = Model::new(&tiny_cfg(), 1).unwrap();
        model.zero_grads();
        let mut before = Vec::new();
        model.visit_params(&mut |p| before.push(p.value.data().to_vec()));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut model).unwrap();
        let mut idx = 0;
        model.visit_params(&mut |p| {
            let frozen: Vec<usize> = match p.frozen_rows {
                Some((rows, dim)) => rows.iter().flat_map(|&r| r * dim..(r + 1) * dim).collect(),
                None => Vec::new(),
            };
            for (i, (&a, &b)) in before[idx].iter().zip(p.value.data()).enumerate() {
                if frozen.contains(&i) {
                    assert_eq!(a, b, "frozen element moved in {}", p.name);
                } else {
                    let expect = a as f64 * (1.0 - 1e-3 * 0.1);
                    assert!(
                        (b as f64 - expect).abs() <= 1e-12 + expect.abs() * 1e-6,
                        "{}[{}]: {} vs {}",
                        p.name,
                        i,
                        b,
                        expect
                    );
                }
            }
            idx += 1;
        });
    }

    #[test]
    fn loss_decreases_on_constant_batch() {
        use crate::data::TokenSource;
        use crate::numerics::bce_with_logits;

        let cfg = tiny_cfg();
        let mut model = Model::new(&cfg, 7).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let bytes: Vec<u8> = (0..64u8).cycle().take(200).collect();
        let src = TokenSource::from_bytes(&bytes, cfg.kernel_width);
        let tokens = src.materialize().unwrap();
        let mut losses = Vec::new();
        for _ in 0..30 {
            model.zero_grads();
            let (logit, state) = model.dense_forward(&tokens).unwrap();
            let (loss, dl) = bce_with_logits(logit, 1);
            model.dense_backward(dl, &state).unwrap();
            opt.step(&mut model).unwrap();
            losses.push(loss);
        }
        assert!(
            losses.last().unwrap() < &(losses[0] * 0.5),
            "loss did not drop: {:?}",
            losses
        );
        // Training must leave predict usable.
        model.predict(&src, Mode::Dense, &Default::default()).unwrap();
    }
}
