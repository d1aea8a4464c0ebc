//! Model assembly tests: padding behavior, gate introspection, and the
//! planted-motif matched-filter construction.

mod common;

use common::rng;
use malconv::data::{TokenSource, PAD_TOKEN};
use malconv::models::{Arch, LowmemOpts, Model, ModelConfig, Net};
use rand::Rng;

fn cfg(arch: Arch, w: usize, s: usize) -> ModelConfig {
    ModelConfig {
        arch,
        embed_dim: 4,
        channels: 32,
        kernel_width: w,
        stride: s,
        context_glu: true,
        head_hidden: None,
    }
}

#[test]
fn all_pad_input_scores_identically_in_both_paths() {
    for arch in [Arch::Malconv, Arch::MalconvGcg] {
        let model = Model::new(&cfg(arch, 16, 8), 21).unwrap();
        let tokens = vec![PAD_TOKEN; 300];
        let (dense_logit, _) = model.dense_forward(&tokens).unwrap();
        let src = TokenSource::from_tokens(tokens);
        let (lm_logit, _) = model.lowmem_forward(&src, &LowmemOpts::default()).unwrap();
        assert_eq!(dense_logit, lm_logit, "{arch}");
        assert!(dense_logit.is_finite());
    }
}

#[test]
fn short_input_is_padded_to_receptive_field() {
    let model = Model::new(&cfg(Arch::Malconv, 64, 64), 4).unwrap();
    let src = TokenSource::from_bytes(&[1, 2, 3], 64);
    assert_eq!(src.len(), 64);
    let logit = model
        .predict(&src, malconv::Mode::Lowmem, &LowmemOpts::default())
        .unwrap();
    assert!(logit.is_finite());
}

#[test]
fn zero_context_projection_gives_half_gates_and_identical_winners() {
    let mut model = Model::new(&cfg(Arch::MalconvGcg, 16, 4), 33).unwrap();
    if let Net::Gcg(n) = &mut model.net {
        n.gcg.w.fill(0.0); // z = tanh(0) = 0 regardless of the context
    }
    let mut r = rng(8);
    let bytes: Vec<u8> = (0..2000).map(|_| r.gen()).collect();
    let src = TokenSource::from_bytes(&bytes, 16);
    let exp = model.explain(&src, &LowmemOpts::default()).unwrap();
    assert_eq!(exp.channels.len(), 32);
    for c in &exp.channels {
        assert_eq!(c.pre_gate_gate, 0.5, "channel {}", c.channel);
        assert_eq!(
            c.pre_gate_offset, c.post_gate_offset,
            "channel {} winners moved with neutral gates",
            c.channel
        );
    }
}

#[test]
fn explain_matches_dense_argmax_of_gated_activations() {
    for seed in 0..10u64 {
        let model = Model::new(&cfg(Arch::MalconvGcg, 16, 4), seed).unwrap();
        let mut r = rng(1000 + seed);
        let t = 500 + r.gen_range(0..1500);
        let bytes: Vec<u8> = (0..t).map(|_| r.gen()).collect();
        let src = TokenSource::from_bytes(&bytes, 16);
        let exp = model.explain(&src, &LowmemOpts::default()).unwrap();

        // Dense oracle: argmax over time of s_t * x_t per channel.
        let (_, state) = model.dense_forward(&src.materialize().unwrap()).unwrap();
        let out = &state.feat.out;
        for ch in 0..32 {
            let mut best = f32::NEG_INFINITY;
            let mut best_t = 0;
            for ti in 0..out.rows() {
                let v = out.row(ti)[ch];
                if v > best {
                    best = v;
                    best_t = ti;
                }
            }
            assert_eq!(
                exp.channels[ch].post_gate_offset,
                best_t * 4,
                "seed {seed} channel {ch}"
            );
            assert_eq!(exp.channels[ch].post_gate_value, best);
        }
        // Region summary accounts for every channel exactly once.
        let total: usize = exp.regions.iter().map(|r| r.channels).sum();
        assert_eq!(total, 32);
    }
}

#[test]
fn matched_filter_channel_wins_at_the_planted_motif() {
    let w = 16usize;
    let stride = 4usize;
    let mut model = Model::new(&cfg(Arch::MalconvGcg, w, stride), 77).unwrap();
    let motif: Vec<u8> = (0..w as u8).map(|i| 200 + i / 4).collect();

    // Channel 0 of the feature trunk becomes a matched filter for the
    // motif's embedded pattern, with the gate branch biased wide open.
    if let Net::Gcg(n) = &mut model.net {
        let dim = n.feat_embedding.dim;
        let emb = n.feat_embedding.weights.data().to_vec();
        for k in 0..w {
            let row = motif[k] as usize * dim;
            for c in 0..dim {
                let idx = (c) * w + k; // weights layout [o][c][k], o = 0
                n.feat_conv_a.weights.data_mut()[idx] = 6.0 * emb[row + c];
            }
        }
        n.feat_conv_b.weights.fill(0.0);
        n.feat_conv_b.bias.data_mut()[0] = 10.0; // sigmoid ~ 1
    }

    let mut r = rng(5);
    let mut bytes: Vec<u8> = (0..4000).map(|_| r.gen_range(0..128u8)).collect();
    let offset = 640; // multiple of the stride, so a window aligns exactly
    bytes[offset..offset + w].copy_from_slice(&motif);
    let src = TokenSource::from_bytes(&bytes, w);
    let exp = model.explain(&src, &LowmemOpts::default()).unwrap();
    assert_eq!(
        exp.channels[0].pre_gate_offset, offset,
        "matched filter did not fire at the planted motif"
    );
}

#[test]
fn explain_rejects_ungated_architecture() {
    let model = Model::new(&cfg(Arch::Malconv, 16, 8), 1).unwrap();
    let src = TokenSource::from_bytes(&[0u8; 100], 16);
    assert!(model.explain(&src, &LowmemOpts::default()).is_err());
}

#[test]
fn config_bounds_are_enforced() {
    for bad in [
        ModelConfig { channels: 16, ..cfg(Arch::Malconv, 16, 8) },
        ModelConfig { channels: 2048, ..cfg(Arch::Malconv, 16, 8) },
        ModelConfig { stride: 2, ..cfg(Arch::Malconv, 16, 8) },
        ModelConfig { embed_dim: 2, ..cfg(Arch::Malconv, 16, 8) },
        cfg(Arch::Malconv, 16, 32), // stride > kernel width
    ] {
        assert!(bad.validate().is_err(), "{bad:?} should be rejected");
    }
    assert!(ModelConfig::malconv().validate().is_ok());
    assert!(ModelConfig::malconv_gcg().validate().is_ok());
}
