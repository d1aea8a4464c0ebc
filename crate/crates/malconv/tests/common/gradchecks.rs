//! Reusable finite-difference gradient checks, shared by the gradcheck
//! test target and the acceptance gate.

use super::*;
use malconv::data::frozen_rows;
use malconv::gcg::{gcg_backward_segment, gcg_finish_backward, gcg_forward, GcgParams};
use malconv::numerics::{
    bce_with_logits, conv1d_backward, glu_backward, glu_forward, Conv1dLayer, EmbeddingTable,
    LinearLayer,
};
use malconv::Tensor;
use rand::Rng;

const TOL: f64 = 1e-3;
const CASES: usize = 20;

fn check(analytic: f32, numeric: f64, what: &str) {
    let err = rel_err(analytic as f64, numeric);
    assert!(
        err < TOL,
        "{what}: analytic {analytic} vs numeric {numeric} (rel err {err:.2e})"
    );
}

pub fn embedding_gradients() {
    for case in 0..CASES {
        let mut r = rng(100 + case as u64);
        let dim = r.gen_range(2..6);
        let mut table = EmbeddingTable::new(258, dim, frozen_rows(), &mut r).unwrap();
        let t = r.gen_range(1..15);
        let tokens: Vec<u16> = (0..t).map(|_| r.gen_range(0..258u16)).collect();
        let dy = Tensor::from_vec(&[t, dim], rand_vec(&mut r, t * dim, -1.0, 1.0));
        table.embed(&tokens).unwrap();
        table.embed_backward(&tokens, &dy);

        let table64 = to_f64(table.weights.data());
        let dy64 = to_f64(dy.data());
        let loss = |tab: &[f64]| -> f64 {
            ref_embed(tab, dim, &tokens)
                .iter()
                .zip(&dy64)
                .map(|(a, b)| a * b)
                .sum()
        };
        let used: std::collections::BTreeSet<usize> =
            tokens.iter().map(|&tok| tok as usize).collect();
        for &row in &used {
            for d in 0..dim {
                let idx = row * dim + d;
                let analytic = table.grad.data()[idx];
                if table.frozen_zero_rows.contains(&row) {
                    assert_eq!(analytic, 0.0, "frozen row {row} accumulated gradient");
                    continue;
                }
                let numeric = central_diff(
                    |v| {
                        let mut tab = table64.clone();
                        tab[idx] = v;
                        loss(&tab)
                    },
                    table64[idx],
                );
                check(analytic, numeric, &format!("embed case {case} w[{idx}]"));
            }
        }
    }
}

pub fn conv1d_gradients() {
    for case in 0..CASES {
        let mut r = rng(200 + case as u64);
        let in_ch = r.gen_range(1..4);
        let out_ch = r.gen_range(1..4);
        let kw = r.gen_range(1..6);
        let stride = r.gen_range(1..=kw);
        let t = kw + r.gen_range(0..12);
        let mut conv = Conv1dLayer::new(in_ch, out_ch, kw, stride, &mut r).unwrap();
        let x = Tensor::from_vec(&[t, in_ch], rand_vec(&mut r, t * in_ch, -1.0, 1.0));
        let y = conv.packed().forward(&x).unwrap();
        let dy = Tensor::from_vec(y.shape(), rand_vec(&mut r, y.len(), -1.0, 1.0));
        let dx = conv1d_backward(&mut conv, &dy, &x).unwrap();

        let w64 = to_f64(conv.weights.data());
        let b64 = to_f64(conv.bias.data());
        let x64 = to_f64(x.data());
        let dy64 = to_f64(dy.data());
        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            ref_conv1d(w, b, out_ch, in_ch, kw, stride, x, t)
                .iter()
                .zip(&dy64)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..w64.len() {
            let numeric = central_diff(
                |v| {
                    let mut w = w64.clone();
                    w[i] = v;
                    loss(&w, &b64, &x64)
                },
                w64[i],
            );
            check(conv.grad_weights.data()[i], numeric, &format!("conv {case} dW[{i}]"));
        }
        for i in 0..b64.len() {
            let numeric = central_diff(
                |v| {
                    let mut b = b64.clone();
                    b[i] = v;
                    loss(&w64, &b, &x64)
                },
                b64[i],
            );
            check(conv.grad_bias.data()[i], numeric, &format!("conv {case} db[{i}]"));
        }
        for i in 0..x64.len() {
            let numeric = central_diff(
                |v| {
                    let mut x = x64.clone();
                    x[i] = v;
                    loss(&w64, &b64, &x)
                },
                x64[i],
            );
            check(dx.data()[i], numeric, &format!("conv {case} dx[{i}]"));
        }
    }
}

pub fn glu_gradients() {
    for case in 0..CASES {
        let mut r = rng(300 + case as u64);
        let t = r.gen_range(1..10);
        let c = r.gen_range(1..8);
        let a = Tensor::from_vec(&[t, c], rand_vec(&mut r, t * c, -2.0, 2.0));
        let b = Tensor::from_vec(&[t, c], rand_vec(&mut r, t * c, -2.0, 2.0));
        let dy = Tensor::from_vec(&[t, c], rand_vec(&mut r, t * c, -1.0, 1.0));
        glu_forward(&a, &b).unwrap();
        let (da, db) = glu_backward(&dy, &a, &b).unwrap();

        let a64 = to_f64(a.data());
        let b64 = to_f64(b.data());
        let dy64 = to_f64(dy.data());
        let loss = |a: &[f64], b: &[f64]| -> f64 {
            ref_glu(a, b).iter().zip(&dy64).map(|(x, y)| x * y).sum()
        };
        for i in 0..a64.len() {
            let numeric = central_diff(
                |v| {
                    let mut a = a64.clone();
                    a[i] = v;
                    loss(&a, &b64)
                },
                a64[i],
            );
            check(da.data()[i], numeric, &format!("glu {case} da[{i}]"));
            let numeric = central_diff(
                |v| {
                    let mut b = b64.clone();
                    b[i] = v;
                    loss(&a64, &b)
                },
                b64[i],
            );
            check(db.data()[i], numeric, &format!("glu {case} db[{i}]"));
        }
    }
}

pub fn gcg_gradients_through_context_projection() {
    for case in 0..CASES {
        let mut r = rng(400 + case as u64);
        let c = r.gen_range(2..7);
        let t = r.gen_range(1..8);
        let mut params = GcgParams::new(c, &mut r);
        let g = rand_vec(&mut r, c, -1.5, 1.5);
        let x = Tensor::from_vec(&[t, c], rand_vec(&mut r, t * c, -1.5, 1.5));
        let dy = Tensor::from_vec(&[t, c], rand_vec(&mut r, t * c, -1.0, 1.0));

        let z = params.context(&g).unwrap();
        let (_, s) = gcg_forward(&x, &z).unwrap();
        let mut dz = vec![0.0f64; c];
        let dx = gcg_backward_segment(&dy, &x, &z, &s, &mut dz).unwrap();
        let dg = gcg_finish_backward(&mut params, &g, &z, &dz).unwrap();

        let w64 = to_f64(params.w.data());
        let g64 = to_f64(&g);
        let x64 = to_f64(x.data());
        let dy64 = to_f64(dy.data());
        let loss = |w: &[f64], g: &[f64], x: &[f64]| -> f64 {
            let z = ref_context(w, c, g);
            ref_gcg(x, t, c, &z)
                .iter()
                .zip(&dy64)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..w64.len() {
            let numeric = central_diff(
                |v| {
                    let mut w = w64.clone();
                    w[i] = v;
                    loss(&w, &g64, &x64)
                },
                w64[i],
            );
            check(params.grad.data()[i], numeric, &format!("gcg {case} dW[{i}]"));
        }
        for i in 0..c {
            let numeric = central_diff(
                |v| {
                    let mut g = g64.clone();
                    g[i] = v;
                    loss(&w64, &g, &x64)
                },
                g64[i],
            );
            check(dg[i], numeric, &format!("gcg {case} dg[{i}]"));
        }
        for i in 0..x64.len() {
            let numeric = central_diff(
                |v| {
                    let mut x = x64.clone();
                    x[i] = v;
                    loss(&w64, &g64, &x)
                },
                x64[i],
            );
            check(dx.data()[i], numeric, &format!("gcg {case} dx[{i}]"));
        }
    }
}

pub fn linear_gradients() {
    for case in 0..CASES {
        let mut r = rng(500 + case as u64);
        let in_d = r.gen_range(1..10);
        let out_d = r.gen_range(1..10);
        let mut l = LinearLayer::new(in_d, out_d, &mut r);
        let x = rand_vec(&mut r, in_d, -2.0, 2.0);
        let dy = rand_vec(&mut r, out_d, -1.0, 1.0);
        l.forward(&x).unwrap();
        let dx = l.backward(&dy, &x).unwrap();

        let w64 = to_f64(l.weights.data());
        let b64 = to_f64(l.bias.data());
        let x64 = to_f64(&x);
        let dy64 = to_f64(&dy);
        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            ref_linear(w, b, out_d, in_d, x)
                .iter()
                .zip(&dy64)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..w64.len() {
            let numeric = central_diff(
                |v| {
                    let mut w = w64.clone();
                    w[i] = v;
                    loss(&w, &b64, &x64)
                },
                w64[i],
            );
            check(l.grad_weights.data()[i], numeric, &format!("linear {case} dW[{i}]"));
        }
        for i in 0..b64.len() {
            let numeric = central_diff(
                |v| {
                    let mut b = b64.clone();
                    b[i] = v;
                    loss(&w64, &b, &x64)
                },
                b64[i],
            );
            check(l.grad_bias.data()[i], numeric, &format!("linear {case} db[{i}]"));
        }
        for i in 0..x64.len() {
            let numeric = central_diff(
                |v| {
                    let mut x = x64.clone();
                    x[i] = v;
                    loss(&w64, &b64, &x)
                },
                x64[i],
            );
            check(dx[i], numeric, &format!("linear {case} dx[{i}]"));
        }
    }
}

pub fn bce_gradient() {
    let mut r = rng(600);
    for case in 0..CASES {
        let logit = r.gen_range(-6.0f32..6.0);
        let label = r.gen_range(0..2u8);
        let (_, dl) = bce_with_logits(logit, label);
        let numeric = central_diff(|v| ref_bce(v, label as f64), logit as f64);
        check(dl, numeric, &format!("bce case {case} ({logit}, {label})"));
    }
}
