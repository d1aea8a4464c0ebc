//! The two classifier architectures, each runnable through a dense
//! reference path and a fixed-memory path.
//!
//! MalConv: embedding (dim 8) -> two 128-channel convolutions (W=512,
//! S=512) -> GLU -> temporal max pool -> two-layer head -> logit.
//!
//! MalConv with GCG: a context trunk (own embedding, 256-channel conv pair
//! W=256 S=64, GLU, max pool) produces a global context vector; a feature
//! trunk with a separate embedding produces activations that are gated per
//! time step by the projected context before pooling and the head.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenSource, frozen_rows, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::fixedmem::{
    build_gather_plan, lowmem_backward, lowmem_forward, lowmem_forward_concat, plan_chunks,
    scan_winners, LowmemTrunkState, Trunk, TrunkLayersMut, WinnerSet,
};
use crate::gcg::{gate_values, gcg_backward_segment, gcg_finish_backward, GcgParams};
use crate::numerics::{
    conv1d_backward, dot, glu_backward, glu_forward, relu_backward, relu_forward, sigmoid,
    temporal_max_pool, temporal_max_pool_backward, Conv1dLayer, EmbeddingTable, LinearLayer,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Malconv,
    MalconvGcg,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::Malconv => write!(f, "malconv"),
            Arch::MalconvGcg => write!(f, "malconv-gcg"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    /// Whether the GCG context trunk uses the GLU conv pair (otherwise a
    /// single convolution with ReLU).
    #[serde(default = "default_true")]
    pub context_glu: bool,
    /// Hidden width of the classifier head; defaults to `channels`.
    #[serde(default)]
    pub head_hidden: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn malconv() -> Self {
        ModelConfig {
            arch: Arch::Malconv,
            embed_dim: 8,
            channels: 128,
            kernel_width: 512,
            stride: 512,
            context_glu: true,
            head_hidden: None,
        }
    }

    pub fn malconv_gcg() -> Self {
        ModelConfig {
            arch: Arch::MalconvGcg,
            embed_dim: 8,
            channels: 256,
            kernel_width: 256,
            stride: 64,
            context_glu: true,
            head_hidden: None,
        }
    }

    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Malconv => Self::malconv(),
            Arch::MalconvGcg => Self::malconv_gcg(),
        }
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.channels)
    }

    /// Receptive field in input bytes (single convolution layer).
    pub fn w_bytes(&self) -> usize {
        self.kernel_width
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize, lo: usize, hi: usize| {
            if v < lo || v > hi {
                Err(Error::Config(format!("{name}={v} outside [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        check("channels", self.channels, 32, 1024)?;
        check("stride", self.stride, 4, 512)?;
        check("embed_dim", self.embed_dim, 4, 64)?;
        check("kernel_width", self.kernel_width, 8, 4096)?;
        if self.stride > self.kernel_width {
            return Err(Error::Config(format!(
                "stride {} exceeds kernel width {}",
                self.stride, self.kernel_width
            )));
        }
        Ok(())
    }
}

/// Fixed-memory path options.
#[derive(Debug, Clone, Copy)]
pub struct LowmemOpts {
    /// Coalesce winner regions closer than W/2.
    pub merge: bool,
    /// Concatenate regions into one sequence instead of exact per-region
    /// computation.
    pub concat: bool,
    pub workers: usize,
}

impl Default for LowmemOpts {
    fn default() -> Self {
        LowmemOpts {
            merge: false,
            concat: false,
            workers: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Classifier head
// ---------------------------------------------------------------------------

pub struct Head {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

pub struct HeadCache {
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    rectified: Vec<f32>,
}

impl Head {
    fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            fc1: LinearLayer::new(in_dim, hidden, rng),
            fc2: LinearLayer::new(hidden, 1, rng),
        }
    }

    fn forward(&self, pooled: &[f32]) -> Result<(f32, HeadCache)> {
        let hidden = self.fc1.forward(pooled)?;
        let rectified = relu_forward(&hidden);
        let logit = self.fc2.forward(&rectified)?[0];
        Ok((
            logit,
            HeadCache {
                pooled: pooled.to_vec(),
                hidden,
                rectified,
            },
        ))
    }

    fn backward(&mut self, d_logit: f32, cache: &HeadCache) -> Result<Vec<f32>> {
        let dr = self.fc2.backward(&[d_logit], &cache.rectified)?;
        let dh = relu_backward(&dr, &cache.hidden);
        self.fc1.backward(&dh, &cache.pooled)
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

pub struct MalConvNet {
    pub embedding: EmbeddingTable,
    pub conv_a: Conv1dLayer,
    pub conv_b: Conv1dLayer,
    pub head: Head,
}

pub struct GcgNet {
    pub ctx_embedding: EmbeddingTable,
    pub ctx_conv_a: Conv1dLayer,
    pub ctx_conv_b: Option<Conv1dLayer>,
    pub feat_embedding: EmbeddingTable,
    pub feat_conv_a: Conv1dLayer,
    pub feat_conv_b: Conv1dLayer,
    pub gcg: GcgParams,
    pub head: Head,
}

pub enum Net {
    MalConv(MalConvNet),
    Gcg(GcgNet),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub net: Net,
}

/// One named parameter with its gradient buffer; embedding tables expose
/// their frozen rows so the optimizer can skip them.
pub struct ParamSlot<'a> {
    pub name: &'static str,
    pub value: &'a mut Tensor,
    pub grad: &'a mut Tensor,
    pub frozen_rows: Option<(&'a BTreeSet<usize>, usize)>,
}

fn slot<'a>(name: &'static str, value: &'a mut Tensor, grad: &'a mut Tensor) -> ParamSlot<'a> {
    ParamSlot {
        name,
        value,
        grad,
        frozen_rows: None,
    }
}

fn embed_slots<'a>(
    weight_name: &'static str,
    e: &'a mut EmbeddingTable,
) -> ParamSlot<'a> {
    ParamSlot {
        name: weight_name,
        frozen_rows: Some((&e.frozen_zero_rows, e.dim)),
        value: &mut e.weights,
        grad: &mut e.grad,
    }
}

fn conv_slots<'a>(
    w_name: &'static str,
    b_name: &'static str,
    c: &'a mut Conv1dLayer,
    f: &mut dyn FnMut(ParamSlot),
) {
    f(slot(w_name, &mut c.weights, &mut c.grad_weights));
    f(slot(b_name, &mut c.bias, &mut c.grad_bias));
}

fn linear_slots<'a>(
    w_name: &'static str,
    b_name: &'static str,
    l: &'a mut LinearLayer,
    f: &mut dyn FnMut(ParamSlot),
) {
    f(slot(w_name, &mut l.weights, &mut l.grad_weights));
    f(slot(b_name, &mut l.bias, &mut l.grad_bias));
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let net = match cfg.arch {
            Arch::Malconv => Net::MalConv(MalConvNet {
                embedding: EmbeddingTable::new(VOCAB_SIZE, cfg.embed_dim, frozen_rows(), &mut rng)?,
                conv_a: Conv1dLayer::new(cfg.embed_dim, c, cfg.kernel_width, cfg.stride, &mut rng)?,
                conv_b: Conv1dLayer::new(cfg.embed_dim, c, cfg.kernel_width, cfg.stride, &mut rng)?,
                head: Head::new(c, cfg.head_hidden(), &mut rng),
            }),
            Arch::MalconvGcg => Net::Gcg(GcgNet {
                ctx_embedding: EmbeddingTable::new(
                    VOCAB_SIZE,
                    cfg.embed_dim,
                    frozen_rows(),
                    &mut rng,
                )?,
                ctx_conv_a: Conv1dLayer::new(
                    cfg.embed_dim,
                    c,
                    cfg.kernel_width,
                    cfg.stride,
                    &mut rng,
                )?,
                ctx_conv_b: if cfg.context_glu {
                    Some(Conv1dLayer::new(
                        cfg.embed_dim,
                        c,
                        cfg.kernel_width,
                        cfg.stride,
                        &mut rng,
                    )?)
                } else {
                    None
                },
                feat_embedding: EmbeddingTable::new(
                    VOCAB_SIZE,
                    cfg.embed_dim,
                    frozen_rows(),
                    &mut rng,
                )?,
                feat_conv_a: Conv1dLayer::new(
                    cfg.embed_dim,
                    c,
                    cfg.kernel_width,
                    cfg.stride,
                    &mut rng,
                )?,
                feat_conv_b: Conv1dLayer::new(
                    cfg.embed_dim,
                    c,
                    cfg.kernel_width,
                    cfg.stride,
                    &mut rng,
                )?,
                gcg: GcgParams::new(c, &mut rng),
                head: Head::new(c, cfg.head_hidden(), &mut rng),
            }),
        };
        Ok(Model {
            cfg: cfg.clone(),
            net,
        })
    }

    /// Minimum token length a sample must be padded to.
    pub fn min_token_len(&self) -> usize {
        self.cfg.w_bytes()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot)) {
        match &mut self.net {
            Net::MalConv(n) => {
                f(embed_slots("embed.weight", &mut n.embedding));
                conv_slots("conv_a.weight", "conv_a.bias", &mut n.conv_a, f);
                conv_slots("conv_b.weight", "conv_b.bias", &mut n.conv_b, f);
                linear_slots("head.fc1.weight", "head.fc1.bias", &mut n.head.fc1, f);
                linear_slots("head.fc2.weight", "head.fc2.bias", &mut n.head.fc2, f);
            }
            Net::Gcg(n) => {
                f(embed_slots("ctx.embed.weight", &mut n.ctx_embedding));
                conv_slots("ctx.conv_a.weight", "ctx.conv_a.bias", &mut n.ctx_conv_a, f);
                if let Some(cb) = n.ctx_conv_b.as_mut() {
                    conv_slots("ctx.conv_b.weight", "ctx.conv_b.bias", cb, f);
                }
                f(embed_slots("feat.embed.weight", &mut n.feat_embedding));
                conv_slots(
                    "feat.conv_a.weight",
                    "feat.conv_a.bias",
                    &mut n.feat_conv_a,
                    f,
                );
                conv_slots(
                    "feat.conv_b.weight",
                    "feat.conv_b.bias",
                    &mut n.feat_conv_b,
                    f,
                );
                f(slot("gcg.w", &mut n.gcg.w, &mut n.gcg.grad));
                linear_slots("head.fc1.weight", "head.fc1.bias", &mut n.head.fc1, f);
                linear_slots("head.fc2.weight", "head.fc2.bias", &mut n.head.fc2, f);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }
}

// ---------------------------------------------------------------------------
// Dense reference path
// ---------------------------------------------------------------------------

/// Full-sequence activations of one trunk, O(T) memory by construction.
pub struct DenseTrunkState {
    pub tokens: Vec<u16>,
    pub emb: Tensor,
    pub a: Tensor,
    pub b: Option<Tensor>,
    /// Post-GLU (pre-gate) activations.
    pub x: Tensor,
    pub gates: Option<Vec<f32>>,
    pub out: Tensor,
    pub pooled: Vec<f32>,
    pub indices: Vec<usize>,
}

fn dense_trunk_forward(
    embedding: &EmbeddingTable,
    conv_a: &Conv1dLayer,
    conv_b: Option<&Conv1dLayer>,
    gate_z: Option<&[f32]>,
    tokens: &[u16],
) -> Result<DenseTrunkState> {
    let emb = embedding.embed(tokens)?;
    let a = conv_a.packed().forward(&emb)?;
    let (b, x) = match conv_b {
        Some(cb) => {
            let b = cb.packed().forward(&emb)?;
            let x = glu_forward(&a, &b)?;
            (Some(b), x)
        }
        None => {
            let mut r = Tensor::zeros(a.shape());
            r.data_mut().copy_from_slice(&relu_forward(a.data()));
            (None, r)
        }
    };
    let (gates, out) = match gate_z {
        Some(z) => {
            let s = gate_values(&x, z)?;
            let mut y = Tensor::zeros(x.shape());
            for t in 0..x.rows() {
                let st = s[t];
                for (o, &v) in y.row_mut(t).iter_mut().zip(x.row(t)) {
                    *o = st * v;
                }
            }
            (Some(s), y)
        }
        None => (None, x.clone()),
    };
    let (pooled, indices) = temporal_max_pool(&out)?;
    Ok(DenseTrunkState {
        tokens: tokens.to_vec(),
        emb,
        a,
        b,
        x,
        gates,
        out,
        pooled,
        indices,
    })
}

fn dense_trunk_backward(
    state: &DenseTrunkState,
    d_pooled: &[f32],
    gate: Option<(&[f32], &mut [f64])>,
    embedding: &mut EmbeddingTable,
    conv_a: &mut Conv1dLayer,
    conv_b: Option<&mut Conv1dLayer>,
) -> Result<()> {
    let d_out = temporal_max_pool_backward(d_pooled, &state.indices, state.out.rows());
    let dx = match gate {
        Some((z, dz_acc)) => {
            let s = state.gates.as_ref().expect("gated state");
            gcg_backward_segment(&d_out, &state.x, z, s, dz_acc)?
        }
        None => d_out,
    };
    let d_emb = match (state.b.as_ref(), conv_b) {
        (Some(b), Some(cb)) => {
            let (da, db) = glu_backward(&dx, &state.a, b)?;
            let mut d_emb = conv1d_backward(conv_a, &da, &state.emb)?;
            let d_emb_b = conv1d_backward(cb, &db, &state.emb)?;
            for (p, q) in d_emb.data_mut().iter_mut().zip(d_emb_b.data()) {
                *p += q;
            }
            d_emb
        }
        _ => {
            let mut da = Tensor::zeros(dx.shape());
            da.data_mut()
                .copy_from_slice(&relu_backward(dx.data(), state.a.data()));
            conv1d_backward(conv_a, &da, &state.emb)?
        }
    };
    embedding.embed_backward(&state.tokens, &d_emb);
    Ok(())
}

pub struct DenseState {
    pub ctx: Option<DenseTrunkState>,
    pub g: Option<Vec<f32>>,
    pub z: Option<Vec<f32>>,
    pub feat: DenseTrunkState,
    pub head: HeadCache,
    pub logit: f32,
}

// ---------------------------------------------------------------------------
// Fixed-memory path
// ---------------------------------------------------------------------------

pub struct LowmemState {
    pub ctx: Option<LowmemTrunkState>,
    pub g: Option<Vec<f32>>,
    pub z: Option<Vec<f32>>,
    pub feat: LowmemTrunkState,
    pub feat_winners: WinnerSet,
    pub head: HeadCache,
    pub logit: f32,
}

fn run_lowmem_trunk(
    src: &TokenSource,
    trunk: &Trunk,
    opts: &LowmemOpts,
) -> Result<(LowmemTrunkState, WinnerSet)> {
    let plan = plan_chunks(src.len(), trunk.w_bytes())?;
    let winners = scan_winners(src, trunk, &plan, opts.workers)?;
    let gather = build_gather_plan(&winners, trunk.w_bytes(), opts.merge, src.len());
    let state = if opts.concat {
        lowmem_forward_concat(src, trunk, &gather)?
    } else {
        lowmem_forward(src, trunk, &gather)?
    };
    Ok((state, winners))
}

impl Model {
    pub fn dense_forward(&self, tokens: &[u16]) -> Result<(f32, DenseState)> {
        match &self.net {
            Net::MalConv(n) => {
                let feat = dense_trunk_forward(
                    &n.embedding,
                    &n.conv_a,
                    Some(&n.conv_b),
                    None,
                    tokens,
                )?;
                let (logit, head) = n.head.forward(&feat.pooled)?;
                Ok((
                    logit,
                    DenseState {
                        ctx: None,
                        g: None,
                        z: None,
                        feat,
                        head,
                        logit,
                    },
                ))
            }
            Net::Gcg(n) => {
                let ctx = dense_trunk_forward(
                    &n.ctx_embedding,
                    &n.ctx_conv_a,
                    n.ctx_conv_b.as_ref(),
                    None,
                    tokens,
                )?;
                let g = ctx.pooled.clone();
                let z = n.gcg.context(&g)?;
                let feat = dense_trunk_forward(
                    &n.feat_embedding,
                    &n.feat_conv_a,
                    Some(&n.feat_conv_b),
                    Some(&z),
                    tokens,
                )?;
                let (logit, head) = n.head.forward(&feat.pooled)?;
                Ok((
                    logit,
                    DenseState {
                        ctx: Some(ctx),
                        g: Some(g),
                        z: Some(z),
                        feat,
                        head,
                        logit,
                    },
                ))
            }
        }
    }

    pub fn dense_backward(&mut self, d_logit: f32, state: &DenseState) -> Result<()> {
        match &mut self.net {
            Net::MalConv(n) => {
                let d_pooled = n.head.backward(d_logit, &state.head)?;
                dense_trunk_backward(
                    &state.feat,
                    &d_pooled,
                    None,
                    &mut n.embedding,
                    &mut n.conv_a,
                    Some(&mut n.conv_b),
                )
            }
            Net::Gcg(n) => {
                let d_pooled = n.head.backward(d_logit, &state.head)?;
                let z = state.z.as_ref().expect("gcg state");
                let g = state.g.as_ref().expect("gcg state");
                let mut dz = vec![0.0f64; z.len()];
                dense_trunk_backward(
                    &state.feat,
                    &d_pooled,
                    Some((z, &mut dz)),
                    &mut n.feat_embedding,
                    &mut n.feat_conv_a,
                    Some(&mut n.feat_conv_b),
                )?;
                let dg = gcg_finish_backward(&mut n.gcg, g, z, &dz)?;
                dense_trunk_backward(
                    state.ctx.as_ref().expect("gcg state"),
                    &dg,
                    None,
                    &mut n.ctx_embedding,
                    &mut n.ctx_conv_a,
                    n.ctx_conv_b.as_mut(),
                )
            }
        }
    }

    pub fn lowmem_forward(
        &self,
        src: &TokenSource,
        opts: &LowmemOpts,
    ) -> Result<(f32, LowmemState)> {
        match &self.net {
            Net::MalConv(n) => {
                let packed_a = n.conv_a.packed();
                let packed_b = n.conv_b.packed();
                let trunk = Trunk {
                    embedding: &n.embedding,
                    conv_a: &packed_a,
                    conv_b: Some(&packed_b),
                    gate_z: None,
                };
                let (feat, feat_winners) = run_lowmem_trunk(src, &trunk, opts)?;
                let (logit, head) = n.head.forward(&feat.pooled)?;
                Ok((
                    logit,
                    LowmemState {
                        ctx: None,
                        g: None,
                        z: None,
                        feat,
                        feat_winners,
                        head,
                        logit,
                    },
                ))
            }
            Net::Gcg(n) => {
                // Phase 1: context trunk scanned and recomputed to get g.
                let ctx_a = n.ctx_conv_a.packed();
                let ctx_b = n.ctx_conv_b.as_ref().map(|c| c.packed());
                let ctx_trunk = Trunk {
                    embedding: &n.ctx_embedding,
                    conv_a: &ctx_a,
                    conv_b: ctx_b.as_ref(),
                    gate_z: None,
                };
                let (ctx, _) = run_lowmem_trunk(src, &ctx_trunk, opts)?;
                let g = ctx.pooled.clone();
                // z is computed once and shared by the no-grad scan and the
                // grad-tracked recompute of the feature trunk.
                let z = n.gcg.context(&g)?;
                let feat_a = n.feat_conv_a.packed();
                let feat_b = n.feat_conv_b.packed();
                let feat_trunk = Trunk {
                    embedding: &n.feat_embedding,
                    conv_a: &feat_a,
                    conv_b: Some(&feat_b),
                    gate_z: Some(&z),
                };
                let (feat, feat_winners) = run_lowmem_trunk(src, &feat_trunk, opts)?;
                let (logit, head) = n.head.forward(&feat.pooled)?;
                Ok((
                    logit,
                    LowmemState {
                        ctx: Some(ctx),
                        g: Some(g),
                        z: Some(z),
                        feat,
                        feat_winners,
                        head,
                        logit,
                    },
                ))
            }
        }
    }

    pub fn lowmem_backward(&mut self, d_logit: f32, state: &LowmemState) -> Result<()> {
        match &mut self.net {
            Net::MalConv(n) => {
                let d_pooled = n.head.backward(d_logit, &state.head)?;
                let mut layers = TrunkLayersMut {
                    embedding: &mut n.embedding,
                    conv_a: &mut n.conv_a,
                    conv_b: Some(&mut n.conv_b),
                };
                lowmem_backward(&state.feat, &d_pooled, None, None, &mut layers)
            }
            Net::Gcg(n) => {
                let d_pooled = n.head.backward(d_logit, &state.head)?;
                let z = state.z.as_ref().expect("gcg state");
                let g = state.g.as_ref().expect("gcg state");
                let mut dz = vec![0.0f64; z.len()];
                let mut feat_layers = TrunkLayersMut {
                    embedding: &mut n.feat_embedding,
                    conv_a: &mut n.feat_conv_a,
                    conv_b: Some(&mut n.feat_conv_b),
                };
                lowmem_backward(
                    &state.feat,
                    &d_pooled,
                    Some(z),
                    Some(&mut dz),
                    &mut feat_layers,
                )?;
                // Context gradients flow only through the recomputed short
                // feature path, consistent with the sparse pooling gradient.
                let dg = gcg_finish_backward(&mut n.gcg, g, z, &dz)?;
                let mut ctx_layers = TrunkLayersMut {
                    embedding: &mut n.ctx_embedding,
                    conv_a: &mut n.ctx_conv_a,
                    conv_b: n.ctx_conv_b.as_mut(),
                };
                lowmem_backward(state.ctx.as_ref().unwrap(), &dg, None, None, &mut ctx_layers)
            }
        }
    }

    /// Forward-only score in the requested mode.
    pub fn predict(&self, src: &TokenSource, mode: Mode, opts: &LowmemOpts) -> Result<f32> {
        let logit = match mode {
            Mode::Dense => self.dense_forward(&src.materialize()?)?.0,
            Mode::Lowmem => self.lowmem_forward(src, opts)?.0,
        };
        if !logit.is_finite() {
            return Err(Error::NonFinite("logit"));
        }
        Ok(logit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Lowmem,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Dense => write!(f, "dense"),
            Mode::Lowmem => write!(f, "lowmem"),
        }
    }
}

// ---------------------------------------------------------------------------
// Introspection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ChannelExplanation {
    pub channel: usize,
    /// Winner byte offset of the ungated feature activations.
    pub pre_gate_offset: usize,
    pub pre_gate_value: f32,
    /// Gate value at the pre-gate winner.
    pub pre_gate_gate: f32,
    /// Winner byte offset after gating.
    pub post_gate_offset: usize,
    pub post_gate_value: f32,
    pub post_gate_gate: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContextWinner {
    pub channel: usize,
    pub offset: usize,
    pub value: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionSummary {
    pub byte_start: usize,
    pub byte_len: usize,
    /// Number of channels whose post-gate winner falls in this region.
    pub channels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    pub channels: Vec<ChannelExplanation>,
    pub context: Vec<ContextWinner>,
    pub regions: Vec<RegionSummary>,
}

impl Model {
    /// Winner/gate introspection of the gated architecture: where each
    /// channel fired before and after gating, the gate value there, and
    /// where the context channels fired.
    pub fn explain(&self, src: &TokenSource, opts: &LowmemOpts) -> Result<Explanation> {
        let n = match &self.net {
            Net::Gcg(n) => n,
            Net::MalConv(_) => {
                return Err(Error::Config(
                    "explain requires a malconv-gcg model".to_string(),
                ))
            }
        };
        let ctx_a = n.ctx_conv_a.packed();
        let ctx_b = n.ctx_conv_b.as_ref().map(|c| c.packed());
        let ctx_trunk = Trunk {
            embedding: &n.ctx_embedding,
            conv_a: &ctx_a,
            conv_b: ctx_b.as_ref(),
            gate_z: None,
        };
        let plan = plan_chunks(src.len(), self.cfg.w_bytes())?;
        let ctx_winners = scan_winners(src, &ctx_trunk, &plan, opts.workers)?;
        let gather = build_gather_plan(&ctx_winners, self.cfg.w_bytes(), opts.merge, src.len());
        let ctx_state = lowmem_forward(src, &ctx_trunk, &gather)?;
        let z = n.gcg.context(&ctx_state.pooled)?;

        let feat_a = n.feat_conv_a.packed();
        let feat_b = n.feat_conv_b.packed();
        let ungated = Trunk {
            embedding: &n.feat_embedding,
            conv_a: &feat_a,
            conv_b: Some(&feat_b),
            gate_z: None,
        };
        let pre = scan_winners(src, &ungated, &plan, opts.workers)?;
        let gated = Trunk {
            gate_z: Some(&z),
            ..ungated
        };
        let post = scan_winners(src, &gated, &plan, opts.workers)?;

        // Gate value at a byte offset: recompute the single window.
        let mut gate_cache: std::collections::BTreeMap<usize, f32> = Default::default();
        let w = self.cfg.w_bytes();
        let mut gate_at = |offset: usize| -> Result<f32> {
            if let Some(&s) = gate_cache.get(&offset) {
                return Ok(s);
            }
            let mut tokens = vec![0u16; w];
            src.read_into(offset, &mut tokens)?;
            let emb = n.feat_embedding.embed(&tokens)?;
            let a = feat_a.forward(&emb)?;
            let b = feat_b.forward(&emb)?;
            let x = glu_forward(&a, &b)?;
            let s = sigmoid(dot(x.row(0), &z));
            gate_cache.insert(offset, s);
            Ok(s)
        };

        let c = self.cfg.channels;
        let mut channels = Vec::with_capacity(c);
        for ch in 0..c {
            channels.push(ChannelExplanation {
                channel: ch,
                pre_gate_offset: pre.byte_start[ch],
                pre_gate_value: pre.values[ch],
                pre_gate_gate: gate_at(pre.byte_start[ch])?,
                post_gate_offset: post.byte_start[ch],
                post_gate_value: post.values[ch],
                post_gate_gate: gate_at(post.byte_start[ch])?,
            });
        }
        let context = (0..c)
            .map(|ch| ContextWinner {
                channel: ch,
                offset: ctx_winners.byte_start[ch],
                value: ctx_winners.values[ch],
            })
            .collect();
        // Group post-gate winners into merged regions for the summary.
        let grouped = build_gather_plan(&post, w, true, src.len());
        let mut counts = vec![0usize; grouped.regions.len()];
        for &r in &grouped.channel_to_region {
            counts[r] += 1;
        }
        let regions = grouped
            .regions
            .iter()
            .zip(&counts)
            .map(|(&(start, len), &n)| RegionSummary {
                byte_start: start,
                byte_len: len,
                channels: n,
            })
            .collect();
        Ok(Explanation {
            channels,
            context,
            regions,
        })
    }
}
