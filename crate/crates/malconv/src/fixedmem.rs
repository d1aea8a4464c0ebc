//! Fixed-memory temporal max pooling over sequences of arbitrary length.
//!
//! Training memory for a max-pooled convolutional trunk normally grows with
//! the sequence length T because every activation is retained for backward.
//! The pooling gradient is sparse, though: only one time step per channel
//! matters. So the trunk is evaluated twice:
//!
//!   1. a gradient-free scan over overlapping chunks (length 3W, stride 2W)
//!      that keeps one chunk's activations alive at a time and tracks each
//!      channel's running maximum with its absolute index;
//!   2. a grad-tracked recompute restricted to the winning receptive fields,
//!      whose total length is bounded by C*W regardless of T.
//!
//! By default each gathered region is convolved independently over its valid
//! positions and pooled twice (per region, then across regions), which
//! reproduces the dense pipeline's pooled values exactly; concatenating the
//! regions into one short sequence is kept behind an option since windows
//! straddling region boundaries can in principle create new activations.

use crate::data::TokenSource;
use crate::error::{Error, Result};
use crate::gcg::{gate_values, gcg_backward_segment};
use crate::numerics::{
    conv1d_backward, glu_backward, glu_forward, relu_backward, relu_forward, Conv1dLayer,
    EmbeddingTable, PackedConv,
};
use crate::tensor::Tensor;

/// Chunk layout for the gradient-free winner scan.
///
/// Chunks start every `2W` bytes and span up to `3W`, so every window of
/// length `W` fits entirely inside the chunk that owns its start position and
/// each start position is owned exactly once.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub t: usize,
    pub w_bytes: usize,
    pub chunk_len: usize,
    pub scan_stride: usize,
    pub chunk_starts: Vec<usize>,
}

pub fn plan_chunks(t: usize, w_bytes: usize) -> Result<ChunkPlan> {
    if t < w_bytes {
        return Err(Error::InputTooShort {
            len: t,
            min: w_bytes,
        });
    }
    let stride = 2 * w_bytes;
    let n_chunks = (t - w_bytes) / stride + 1;
    Ok(ChunkPlan {
        t,
        w_bytes,
        chunk_len: 3 * w_bytes,
        scan_stride: stride,
        chunk_starts: (0..n_chunks).map(|k| k * stride).collect(),
    })
}

impl ChunkPlan {
    /// Half-open interval of window start positions owned by chunk `k`.
    pub fn ownership(&self, k: usize) -> (usize, usize) {
        let a = self.chunk_starts[k];
        let b = (a + self.scan_stride).min(self.t - self.w_bytes + 1);
        (a, b)
    }
}

/// The gradient-free prefix of a model: embedding, the convolution pair, the
/// GLU gate, and optionally the global channel gate (when a projected
/// context `z` is supplied).
pub struct Trunk<'a> {
    pub embedding: &'a EmbeddingTable,
    pub conv_a: &'a PackedConv,
    /// `None` disables the GLU pair: the trunk is then conv_a + ReLU.
    pub conv_b: Option<&'a PackedConv>,
    /// Projected context `z = tanh(W' g)`; gates each time step when present.
    pub gate_z: Option<&'a [f32]>,
}

/// Per-segment activations retained for the grad-tracked recompute.
pub struct SegmentActivations {
    /// Absolute byte offset of the segment start (multiple of the stride).
    pub start: usize,
    pub tokens: Vec<u16>,
    pub emb: Tensor,
    pub a: Tensor,
    pub b: Option<Tensor>,
    /// Post-GLU (pre-gate) activations.
    pub x: Tensor,
    /// Gate values when the trunk is gated.
    pub gates: Option<Vec<f32>>,
    /// Final activations (gated or `x`).
    pub out: Tensor,
    pub max_val: Vec<f32>,
    pub max_local: Vec<usize>,
}

impl<'a> Trunk<'a> {
    pub fn w_bytes(&self) -> usize {
        self.conv_a.kernel_width
    }

    pub fn stride(&self) -> usize {
        self.conv_a.stride
    }

    pub fn channels(&self) -> usize {
        self.conv_a.out_channels
    }

    /// Forward over one token slice, discarding intermediates.
    fn activations(&self, tokens: &[u16]) -> Result<Tensor> {
        let emb = self.embedding.embed(tokens)?;
        let a = self.conv_a.forward(&emb)?;
        let x = match self.conv_b {
            Some(cb) => {
                let b = cb.forward(&emb)?;
                glu_forward(&a, &b)?
            }
            None => {
                let mut r = Tensor::zeros(a.shape());
                r.data_mut().copy_from_slice(&relu_forward(a.data()));
                r
            }
        };
        match self.gate_z {
            Some(z) => {
                let s = gate_values(&x, z)?;
                let mut y = Tensor::zeros(x.shape());
                for t in 0..x.rows() {
                    let st = s[t];
                    for (o, &v) in y.row_mut(t).iter_mut().zip(x.row(t)) {
                        *o = st * v;
                    }
                }
                Ok(y)
            }
            None => Ok(x),
        }
    }

    /// Forward over one segment, keeping every intermediate for backward.
    fn segment(&self, src: &TokenSource, start: usize, len: usize) -> Result<SegmentActivations> {
        let mut tokens = vec![0u16; len];
        src.read_into(start, &mut tokens)?;
        let emb = self.embedding.embed(&tokens)?;
        let a = self.conv_a.forward(&emb)?;
        let (b, x) = match self.conv_b {
            Some(cb) => {
                let b = cb.forward(&emb)?;
                let x = glu_forward(&a, &b)?;
                (Some(b), x)
            }
            None => {
                let mut r = Tensor::zeros(a.shape());
                r.data_mut().copy_from_slice(&relu_forward(a.data()));
                (None, r)
            }
        };
        let (gates, out) = match self.gate_z {
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
        let c = out.cols();
        let mut max_val = out.row(0).to_vec();
        let mut max_local = vec![0usize; c];
        for l in 1..out.rows() {
            let row = out.row(l);
            for ch in 0..c {
                if row[ch] > max_val[ch] {
                    max_val[ch] = row[ch];
                    max_local[ch] = l;
                }
            }
        }
        Ok(SegmentActivations {
            start,
            tokens,
            emb,
            a,
            b,
            x,
            gates,
            out,
            max_val,
            max_local,
        })
    }
}

/// Per-channel global maxima from the no-grad scan.
#[derive(Debug, Clone, PartialEq)]
pub struct WinnerSet {
    pub values: Vec<f32>,
    /// Absolute convolution-output time step of each winner.
    pub out_index: Vec<usize>,
    /// Absolute input byte offset (`out_index * stride`).
    pub byte_start: Vec<usize>,
}

impl WinnerSet {
    fn new(channels: usize) -> Self {
        WinnerSet {
            values: vec![f32::NEG_INFINITY; channels],
            out_index: vec![0; channels],
            byte_start: vec![0; channels],
        }
    }

    /// Merge `other` (whose winners all have higher indices) into `self`.
    fn absorb(&mut self, other: &WinnerSet) {
        for c in 0..self.values.len() {
            if other.values[c] > self.values[c] {
                self.values[c] = other.values[c];
                self.out_index[c] = other.out_index[c];
                self.byte_start[c] = other.byte_start[c];
            }
        }
    }
}

/// Gradient-free chunked scan: one chunk of activations alive at a time,
/// running per-channel maxima with absolute indices. Ties keep the earlier
/// index, matching the dense argmax exactly.
pub fn scan_winners(
    src: &TokenSource,
    trunk: &Trunk,
    plan: &ChunkPlan,
    workers: usize,
) -> Result<WinnerSet> {
    let n_chunks = plan.chunk_starts.len();
    if workers <= 1 || n_chunks < 2 * workers {
        return scan_range(src, trunk, plan, 0, n_chunks);
    }
    // Fan chunks out in contiguous blocks; block results merge in index
    // order, so the reduction is deterministic for any worker count.
    let block = n_chunks.div_ceil(workers);
    let results: Vec<Result<WinnerSet>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_chunks)
            .step_by(block)
            .map(|lo| {
                let hi = (lo + block).min(n_chunks);
                scope.spawn(move || scan_range(src, trunk, plan, lo, hi))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut winners = WinnerSet::new(trunk.channels());
    for r in results {
        winners.absorb(&r?);
    }
    Ok(winners)
}

fn scan_range(
    src: &TokenSource,
    trunk: &Trunk,
    plan: &ChunkPlan,
    lo: usize,
    hi: usize,
) -> Result<WinnerSet> {
    let stride = trunk.stride();
    let w = plan.w_bytes;
    let mut winners = WinnerSet::new(trunk.channels());
    let mut tokens: Vec<u16> = Vec::new();
    for k in lo..hi {
        let (own_lo, own_hi) = plan.ownership(k);
        // Window starts are multiples of the convolution stride.
        let first = own_lo.div_ceil(stride) * stride;
        if first >= own_hi {
            continue;
        }
        let last = (own_hi - 1) / stride * stride;
        let n = (last - first) / stride + 1;
        let span = (n - 1) * stride + w;
        tokens.resize(span, 0);
        src.read_into(first, &mut tokens)?;
        let act = trunk.activations(&tokens)?;
        debug_assert_eq!(act.rows(), n);
        for l in 0..n {
            let row = act.row(l);
            for c in 0..row.len() {
                if row[c] > winners.values[c] {
                    winners.values[c] = row[c];
                    winners.out_index[c] = first / stride + l;
                    winners.byte_start[c] = first + l * stride;
                }
            }
        }
    }
    Ok(winners)
}

/// Byte regions selected for grad-tracked recomputation.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    /// `(byte_start, byte_len)`, sorted by start, each at least `W` long.
    pub regions: Vec<(usize, usize)>,
    /// Region covering each channel's winner window.
    pub channel_to_region: Vec<usize>,
}

impl GatherPlan {
    pub fn total_bytes(&self) -> usize {
        self.regions.iter().map(|&(_, l)| l).sum()
    }
}

/// One region per distinct winner window; identical windows deduplicate.
/// With `merge` on, winners closer than `W/2` coalesce into a single region
/// spanning from the lowest start to the highest start plus `W`.
pub fn build_gather_plan(
    winners: &WinnerSet,
    w_bytes: usize,
    merge: bool,
    t: usize,
) -> GatherPlan {
    let mut starts: Vec<usize> = winners.byte_start.clone();
    starts.sort_unstable();
    starts.dedup();

    let mut regions: Vec<(usize, usize)> = Vec::new();
    let mut group_lo = starts[0];
    let mut group_hi = starts[0];
    let mut bounds: Vec<(usize, usize)> = Vec::new(); // winner-start span per region
    for &s in &starts[1..] {
        if merge && s - group_hi < w_bytes / 2 {
            group_hi = s;
        } else {
            bounds.push((group_lo, group_hi));
            group_lo = s;
            group_hi = s;
        }
    }
    bounds.push((group_lo, group_hi));
    for &(lo, hi) in &bounds {
        let end = (hi + w_bytes).min(t);
        regions.push((lo, end - lo));
    }

    let channel_to_region = winners
        .byte_start
        .iter()
        .map(|&b| {
            bounds
                .iter()
                .position(|&(lo, hi)| b >= lo && b <= hi)
                .expect("winner start must fall in a region")
        })
        .collect();
    GatherPlan {
        regions,
        channel_to_region,
    }
}

/// Pooled trunk output recomputed over the gathered regions, with every
/// short-sequence intermediate retained for backward. Memory is bounded by
/// the plan's total bytes, independent of the original length.
pub struct LowmemTrunkState {
    pub segments: Vec<SegmentActivations>,
    pub pooled: Vec<f32>,
    pub winner_segment: Vec<usize>,
    pub winner_local: Vec<usize>,
    /// Absolute convolution-output index per channel.
    pub winner_abs: Vec<usize>,
}

/// Exact-mode recompute: each region embedded and convolved independently
/// over its valid positions, pooled per region, then pooled across regions.
pub fn lowmem_forward(
    src: &TokenSource,
    trunk: &Trunk,
    plan: &GatherPlan,
) -> Result<LowmemTrunkState> {
    let w = trunk.w_bytes();
    let stride = trunk.stride();
    let mut segments = Vec::with_capacity(plan.regions.len());
    for &(start, len) in &plan.regions {
        if len < w {
            return Err(Error::InputTooShort { len, min: w });
        }
        segments.push(trunk.segment(src, start, len)?);
    }
    Ok(pool_segments(segments, stride))
}

/// Concatenation mode: the regions form one short sequence convolved in a
/// single call. Windows crossing region boundaries can in principle create
/// activations the dense pipeline never saw.
pub fn lowmem_forward_concat(
    src: &TokenSource,
    trunk: &Trunk,
    plan: &GatherPlan,
) -> Result<LowmemTrunkState> {
    let stride = trunk.stride();
    let total: usize = plan.total_bytes();
    let mut tokens = vec![0u16; total];
    let mut off = 0;
    for &(start, len) in &plan.regions {
        src.read_into(start, &mut tokens[off..off + len])?;
        off += len;
    }
    let concat = TokenSource::from_tokens(tokens);
    let seg = trunk.segment(&concat, 0, total)?;
    Ok(pool_segments(vec![seg], stride))
}

fn pool_segments(segments: Vec<SegmentActivations>, stride: usize) -> LowmemTrunkState {
    let c = segments[0].out.cols();
    let mut pooled = vec![f32::NEG_INFINITY; c];
    let mut winner_segment = vec![0usize; c];
    let mut winner_local = vec![0usize; c];
    let mut winner_abs = vec![usize::MAX; c];
    for (si, seg) in segments.iter().enumerate() {
        for ch in 0..c {
            let abs = seg.start / stride + seg.max_local[ch];
            let v = seg.max_val[ch];
            if v > pooled[ch] || (v == pooled[ch] && abs < winner_abs[ch]) {
                pooled[ch] = v;
                winner_segment[ch] = si;
                winner_local[ch] = seg.max_local[ch];
                winner_abs[ch] = abs;
            }
        }
    }
    LowmemTrunkState {
        segments,
        pooled,
        winner_segment,
        winner_local,
        winner_abs,
    }
}

/// Layers behind one trunk, borrowed mutably for gradient accumulation.
pub struct TrunkLayersMut<'a> {
    pub embedding: &'a mut EmbeddingTable,
    pub conv_a: &'a mut Conv1dLayer,
    pub conv_b: Option<&'a mut Conv1dLayer>,
}

/// Backward through the recomputed segments given the pooled gradient.
///
/// Routes each channel's gradient to its winning position, applies the gate
/// adjoint per segment when the trunk was gated (accumulating the context
/// gradient into `dz_acc`), then runs the GLU and convolution adjoints per
/// segment and scatters into the embedding table.
pub fn lowmem_backward(
    state: &LowmemTrunkState,
    d_pooled: &[f32],
    z: Option<&[f32]>,
    dz_acc: Option<&mut [f64]>,
    layers: &mut TrunkLayersMut,
) -> Result<()> {
    let c = d_pooled.len();
    let mut dz_acc = dz_acc;
    for (si, seg) in state.segments.iter().enumerate() {
        let mut d_out = Tensor::zeros(seg.out.shape());
        let mut any = false;
        for ch in 0..c {
            if state.winner_segment[ch] == si && d_pooled[ch] != 0.0 {
                d_out.row_mut(state.winner_local[ch])[ch] += d_pooled[ch];
                any = true;
            }
        }
        if !any {
            continue;
        }
        let dx = match (z, seg.gates.as_ref()) {
            (Some(z), Some(s)) => {
                let acc = dz_acc
                    .as_deref_mut()
                    .expect("gated trunk backward needs a dz accumulator");
                gcg_backward_segment(&d_out, &seg.x, z, s, acc)?
            }
            _ => d_out,
        };
        segment_backward(seg, &dx, layers)?;
    }
    Ok(())
}

/// GLU + convolution + embedding adjoints over one segment.
pub fn segment_backward(
    seg: &SegmentActivations,
    dx: &Tensor,
    layers: &mut TrunkLayersMut,
) -> Result<()> {
    let d_emb = match (&seg.b, layers.conv_b.as_deref_mut()) {
        (Some(b), Some(conv_b)) => {
            let (da, db) = glu_backward(dx, &seg.a, b)?;
            let mut d_emb = conv1d_backward(layers.conv_a, &da, &seg.emb)?;
            let d_emb_b = conv1d_backward(conv_b, &db, &seg.emb)?;
            for (a, b) in d_emb.data_mut().iter_mut().zip(d_emb_b.data()) {
                *a += b;
            }
            d_emb
        }
        _ => {
            let mut da = Tensor::zeros(dx.shape());
            da.data_mut()
                .copy_from_slice(&relu_backward(dx.data(), seg.a.data()));
            conv1d_backward(layers.conv_a, &da, &seg.emb)?
        }
    };
    layers.embedding.embed_backward(&seg.tokens, &d_emb);
    Ok(())
}
