//! Constant-memory streaming decode.
//!
//! Each TTT layer keeps two bounded caches: a ring of the last `w` rotated
//! keys/values for the attention branch, and a pending buffer of
//! conv-enhanced keys/values that is folded into the fast weights once it
//! holds `b` rows. A short tail of pre-conv projections from recent frames
//! feeds the temporal taps of the causal convolution. Anchor layers keep a
//! full cache, which grows with the stream.
//!
//! Frames are the unit of input: the spatial taps of the convolution need
//! a whole frame, so a frame's tokens are projected together. Inside a
//! frame, tokens are split at chunk boundaries so that tokens after a
//! flush see the updated weights, exactly as in chunked prefill.

use std::collections::VecDeque;

use crate::attention::masked_attention_var;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fast_weights::{fw_apply_var, update_var, FwVars};
use crate::flops::FlopCategory;
use crate::model::{
    ffn_var, logits_var, qk_shift_var, qkv_var, rms_norm_var, rope_table, HybridConfig, LayerKind, LayerParams,
    ModelParams,
};
use crate::scalar::Scalar;
use crate::spatial::{geometry, ConvMode};
use crate::tensor::Tensor;

/// Fixed-capacity FIFO of rows; pushing into a full ring drops the oldest.
#[derive(Clone, Debug)]
pub struct RowRing<F> {
    cols: usize,
    cap: usize,
    data: Vec<F>,
    start: usize,
    len: usize,
}

impl<F: Scalar> RowRing<F> {
    pub fn new(cap: usize, cols: usize) -> Self {
        Self { cols, cap, data: vec![F::zero(); cap * cols], start: 0, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn push(&mut self, row: &[F]) {
        let slot = (self.start + self.len) % self.cap;
        self.data[slot * self.cols..(slot + 1) * self.cols].copy_from_slice(row);
        if self.len == self.cap {
            self.start = (self.start + 1) % self.cap;
        } else {
            self.len += 1;
        }
    }

    /// Rows oldest first.
    pub fn to_tensor(&self) -> Tensor<F> {
        let mut out = Vec::with_capacity(self.len * self.cols);
        for i in 0..self.len {
            let slot = (self.start + i) % self.cap;
            out.extend_from_slice(&self.data[slot * self.cols..(slot + 1) * self.cols]);
        }
        Tensor::new(&[self.len, self.cols], out).expect("ring rows")
    }

    /// Scalars allocated.
    pub fn allocated(&self) -> usize {
        self.data.len()
    }
}

/// Fixed-capacity append buffer of rows.
#[derive(Clone, Debug)]
pub struct RowBuffer<F> {
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> RowBuffer<F> {
    pub fn new(cap: usize, cols: usize) -> Self {
        Self { cols, data: Vec::with_capacity(cap * cols) }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[F]) {
        self.data.extend_from_slice(row);
    }

    pub fn clear(&mut self) {
        self.data.clear();
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(&[self.len(), self.cols], self.data.clone()).expect("buffer rows")
    }

    pub fn allocated(&self) -> usize {
        self.data.capacity()
    }
}

pub struct TttLayerState<F> {
    /// Rotated keys and values of the last `w` positions.
    pub window_k: RowRing<F>,
    pub window_v: RowRing<F>,
    pub window_pos: VecDeque<usize>,
    /// Conv-enhanced keys and values awaiting the next update.
    pub pending_k: RowBuffer<F>,
    pub pending_v: RowBuffer<F>,
    /// Pre-conv `[Q, K, V]` of the most recent `κ_t − 1` frames.
    pub conv_tail: VecDeque<[Tensor<F>; 3]>,
    pub fast_weights: FwVars<F>,
    pub flushes: usize,
}

pub enum LayerState<F> {
    Ttt(Box<TttLayerState<F>>),
    Window { k: RowRing<F>, v: RowRing<F>, pos: VecDeque<usize> },
    Anchor { k: Vec<F>, v: Vec<F>, len: usize },
}

/// Cache occupancy of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Occupancy {
    pub kind: LayerKind,
    pub window: usize,
    pub pending: usize,
    pub tail_frames: usize,
    pub full: usize,
}

pub struct StreamState<F> {
    pub layers: Vec<LayerState<F>>,
    pub position: usize,
    pub frames: usize,
}

/// Parameters bound once to a non-recording tape for repeated steps.
pub struct StreamModel<F> {
    tape: Tape,
    params: ModelParams<Var<F>>,
    cfg: HybridConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    /// Any number of text tokens.
    Text,
    /// One whole frame, `H·W` tokens in raster order.
    Frame,
}

pub struct StepOutput<F> {
    /// Residual stream rows for the fed tokens.
    pub hidden: Tensor<F>,
    /// Automatic flushes triggered during this step (summed over layers).
    pub flushes: usize,
}

impl<F: Scalar> StreamModel<F> {
    pub fn new(params: &ModelParams<Tensor<F>>, cfg: &HybridConfig) -> Result<Self> {
        cfg.validate()?;
        let tape = Tape::no_grad();
        let params = params.bind(&tape, |_| false);
        Ok(Self { tape, params, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &HybridConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Logits for the given residual rows.
    pub fn logits(&self, hidden: &Tensor<F>) -> Result<Tensor<F>> {
        let h = self.tape.constant(hidden.as_matrix());
        let rows: Vec<usize> = (0..hidden.rows()).collect();
        Ok(logits_var(&self.tape, &self.params, &h, &rows, self.cfg.norm_eps)?.value().clone())
    }
}

/// Empty caches and fast weights at their learned initial values.
pub fn stream_init<F: Scalar>(model: &StreamModel<F>) -> Result<StreamState<F>> {
    let cfg = &model.cfg;
    if cfg.window != cfg.chunk {
        return Err(Error::Stream(format!("streaming needs w = b, got w = {} and b = {}", cfg.window, cfg.chunk)));
    }
    if cfg.conv_mode == ConvMode::Centered && cfg.layout.count(LayerKind::Ttt) > 0 {
        return Err(Error::Stream("centered convolution needs future frames; stream with causal_temporal".into()));
    }
    let d = cfg.d;
    let mut layers = Vec::with_capacity(model.params.layers.len());
    for p in &model.params.layers {
        layers.push(match (p.kind, &p.ttt) {
            (LayerKind::Ttt, Some(t)) => LayerState::Ttt(Box::new(TttLayerState {
                window_k: RowRing::new(cfg.window, d),
                window_v: RowRing::new(cfg.window, d),
                window_pos: VecDeque::with_capacity(cfg.window),
                pending_k: RowBuffer::new(cfg.chunk, d),
                pending_v: RowBuffer::new(cfg.chunk, d),
                conv_tail: VecDeque::with_capacity(cfg.kernel[0]),
                fast_weights: FwVars::start(&model.tape, &t.fw_init)?,
                flushes: 0,
            })),
            (LayerKind::Ttt, None) => return Err(Error::Config("TTT layer without TTT parameters".into())),
            (LayerKind::Window, _) => LayerState::Window {
                k: RowRing::new(cfg.window, d),
                v: RowRing::new(cfg.window, d),
                pos: VecDeque::with_capacity(cfg.window),
            },
            (LayerKind::Anchor, _) => LayerState::Anchor { k: Vec::new(), v: Vec::new(), len: 0 },
        });
    }
    Ok(StreamState { layers, position: 0, frames: 0 })
}

fn push_rows<F: Scalar>(ring_k: &mut RowRing<F>, ring_v: &mut RowRing<F>, pos: &mut VecDeque<usize>, k: &Tensor<F>, v: &Tensor<F>, start: usize) {
    for i in 0..k.rows() {
        ring_k.push(k.row(i));
        ring_v.push(v.row(i));
        pos.push_back(start + i);
        if pos.len() > ring_k.capacity() {
            pos.pop_front();
        }
    }
}

/// Sliding-window attention of the current rows over ring + current.
fn window_step<F: Scalar>(
    tape: &Tape,
    cfg: &HybridConfig,
    ring: (&mut RowRing<F>, &mut RowRing<F>, &mut VecDeque<usize>),
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    start: usize,
) -> Result<Var<F>> {
    let (rk, rv, rpos) = ring;
    let m = q.rows();
    let keys = tape.concat_rows(&[tape.constant(rk.to_tensor()), k.clone()])?;
    let vals = tape.concat_rows(&[tape.constant(rv.to_tensor()), v.clone()])?;
    let q_pos: Vec<usize> = (start..start + m).collect();
    let k_pos: Vec<usize> = rpos.iter().copied().chain(start..start + m).collect();
    let out = masked_attention_var(tape, q, &keys, &vals, cfg.heads, &q_pos, &k_pos, Some(cfg.window))?;
    push_rows(rk, rv, rpos, k.value(), v.value(), start);
    Ok(out)
}

/// Causal conv of the current frame against the tail of earlier frames.
fn conv_frame<F: Scalar>(
    tape: &Tape,
    cfg: &HybridConfig,
    tail: &VecDeque<[Tensor<F>; 3]>,
    current: &Var<F>,
    which: usize,
    kernel: &Var<F>,
) -> Result<Var<F>> {
    let mut parts: Vec<Var<F>> = tail.iter().map(|f| tape.constant(f[which].clone())).collect();
    parts.push(current.clone());
    let vol = tape.concat_rows(&parts)?;
    let [kt, kh, kw] = cfg.kernel;
    let mut geom = geometry(kt, kh, kw, cfg.conv_mode, tail.len() + 1, cfg.grid_h, cfg.grid_w);
    geom.out_t0 = tail.len();
    let _cat = tape.category(FlopCategory::Conv);
    tape.conv3d(&vol, kernel, geom)
}

fn ttt_step<F: Scalar>(
    tape: &Tape,
    cfg: &HybridConfig,
    p: &LayerParams<Var<F>>,
    st: &mut TttLayerState<F>,
    h: &Var<F>,
    kind: SegmentKind,
    start: usize,
) -> Result<(Var<F>, usize)> {
    let t = p.ttt.as_ref().expect("ttt layer");
    let [q, k, v] = qkv_var(tape, p, h)?;
    let (qs, ks) = qk_shift_var(tape, t, &q, &k)?;
    let (qc, kc, vc) = if kind == SegmentKind::Frame {
        let out = (
            conv_frame(tape, cfg, &st.conv_tail, &qs, 0, &t.conv[0])?,
            conv_frame(tape, cfg, &st.conv_tail, &ks, 1, &t.conv[1])?,
            conv_frame(tape, cfg, &st.conv_tail, &v, 2, &t.conv[2])?,
        );
        st.conv_tail.push_back([qs.value().clone(), ks.value().clone(), v.value().clone()]);
        while st.conv_tail.len() > cfg.kernel[0] - 1 {
            st.conv_tail.pop_front();
        }
        out
    } else {
        (qs, ks, v.clone())
    };

    let m = h.rows();
    let mut outs = Vec::new();
    let mut flushes = 0;
    let mut s = 0;
    while s < m {
        let len = (cfg.chunk - st.pending_k.len()).min(m - s);
        let qi = if len == m { qc.clone() } else { tape.slice_rows(&qc, s, len)? };
        outs.push(fw_apply_var(tape, &st.fast_weights.weights, &qi)?);
        for r in s..s + len {
            st.pending_k.push(kc.value().row(r));
            st.pending_v.push(vc.value().row(r));
        }
        if st.pending_k.len() == cfg.chunk {
            flush_layer(tape, cfg, st)?;
            flushes += 1;
        }
        s += len;
    }
    let o_ttt = tape.concat_rows(&outs)?;
    let gated = tape.mul_row(&o_ttt, &t.gate)?;

    let rope = rope_table(cfg, start, m);
    let (qr, kr) = (tape.rope(&q, rope.clone())?, tape.rope(&k, rope)?);
    let attn = window_step(tape, cfg, (&mut st.window_k, &mut st.window_v, &mut st.window_pos), &qr, &kr, &v, start)?;
    Ok((tape.matmul(&tape.add(&gated, &attn)?, &p.wo)?, flushes))
}

fn flush_layer<F: Scalar>(tape: &Tape, cfg: &HybridConfig, st: &mut TttLayerState<F>) -> Result<()> {
    let k = tape.constant(st.pending_k.to_tensor());
    let v = tape.constant(st.pending_v.to_tensor());
    st.fast_weights = update_var(tape, &st.fast_weights, &k, &v, &cfg.update)?;
    st.pending_k.clear();
    st.pending_v.clear();
    st.flushes += 1;
    Ok(())
}

/// Feeds one segment through every layer and returns its residual rows.
pub fn stream_step<F: Scalar>(
    model: &StreamModel<F>,
    state: &mut StreamState<F>,
    ids: &[usize],
    kind: SegmentKind,
) -> Result<StepOutput<F>> {
    let (tape, cfg) = (&model.tape, &model.cfg);
    let m = ids.len();
    if m == 0 {
        return Err(Error::Stream("empty segment".into()));
    }
    if kind == SegmentKind::Frame && m != cfg.cells() {
        return Err(Error::Stream(format!("frame of {m} tokens, grid has {} cells", cfg.cells())));
    }
    let vocab = model.params.tok_emb.rows();
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::Stream(format!("token {bad} outside vocabulary of {vocab}")));
    }
    let start = state.position;
    let tok = tape.gather_rows(&model.params.tok_emb, ids)?;
    let mut x = if kind == SegmentKind::Frame {
        let cells: Vec<usize> = (0..m).collect();
        tape.add(&tok, &tape.gather_rows(&model.params.cell_emb, &cells)?)?
    } else {
        tok
    };
    let mut flushes = 0;
    for (p, ls) in model.params.layers.iter().zip(state.layers.iter_mut()) {
        let h = rms_norm_var(tape, &x, &p.attn_norm, cfg.norm_eps)?;
        let mixed = match ls {
            LayerState::Ttt(st) => {
                let (out, f) = ttt_step(tape, cfg, p, st, &h, kind, start)?;
                flushes += f;
                out
            }
            LayerState::Window { k: rk, v: rv, pos } => {
                let [q, k, v] = qkv_var(tape, p, &h)?;
                let rope = rope_table(cfg, start, m);
                let (qr, kr) = (tape.rope(&q, rope.clone())?, tape.rope(&k, rope)?);
                let attn = window_step(tape, cfg, (rk, rv, pos), &qr, &kr, &v, start)?;
                tape.matmul(&attn, &p.wo)?
            }
            LayerState::Anchor { k: ck, v: cv, len } => {
                let [q, k, v] = qkv_var(tape, p, &h)?;
                let rope = rope_table(cfg, start, m);
                let (qr, kr) = (tape.rope(&q, rope.clone())?, tape.rope(&k, rope)?);
                ck.extend_from_slice(kr.value().data());
                cv.extend_from_slice(v.value().data());
                *len += m;
                let keys = tape.constant(Tensor::new(&[*len, cfg.d], ck.clone())?);
                let vals = tape.constant(Tensor::new(&[*len, cfg.d], cv.clone())?);
                let q_pos: Vec<usize> = (start..start + m).collect();
                let k_pos: Vec<usize> = (0..*len).collect();
                let attn = masked_attention_var(tape, &qr, &keys, &vals, cfg.heads, &q_pos, &k_pos, None)?;
                tape.matmul(&attn, &p.wo)?
            }
        };
        let x1 = tape.add(&x, &mixed)?;
        let f = ffn_var(tape, p, &rms_norm_var(tape, &x1, &p.ffn_norm, cfg.norm_eps)?)?;
        x = tape.add(&x1, &f)?;
    }
    state.position += m;
    if kind == SegmentKind::Frame {
        state.frames += 1;
    }
    Ok(StepOutput { hidden: x.value().clone(), flushes })
}

/// Forces an update on every nonempty pending buffer (a partial chunk at
/// end of stream). Returns the number of layers flushed.
pub fn flush_pending<F: Scalar>(model: &StreamModel<F>, state: &mut StreamState<F>) -> Result<usize> {
    let mut flushed = 0;
    for ls in &mut state.layers {
        if let LayerState::Ttt(st) = ls {
            if !st.pending_k.is_empty() {
                flush_layer(&model.tape, &model.cfg, st)?;
                flushed += 1;
            }
        }
    }
    if flushed == 0 {
        return Err(Error::Stream("no pending keys to flush".into()));
    }
    Ok(flushed)
}

impl<F: Scalar> StreamState<F> {
    pub fn occupancy(&self) -> Vec<Occupancy> {
        self.layers
            .iter()
            .map(|ls| match ls {
                LayerState::Ttt(st) => Occupancy {
                    kind: LayerKind::Ttt,
                    window: st.window_k.len(),
                    pending: st.pending_k.len(),
                    tail_frames: st.conv_tail.len(),
                    full: 0,
                },
                LayerState::Window { k, .. } => {
                    Occupancy { kind: LayerKind::Window, window: k.len(), pending: 0, tail_frames: 0, full: 0 }
                }
                LayerState::Anchor { len, .. } => {
                    Occupancy { kind: LayerKind::Anchor, window: 0, pending: 0, tail_frames: 0, full: *len }
                }
            })
            .collect()
    }

    /// Scalars allocated for TTT-layer state: both caches, the conv tail
    /// and the fast weights (weights, momentum, magnitudes).
    pub fn ttt_state_scalars(&self) -> usize {
        let mut total = 0;
        for ls in &self.layers {
            if let LayerState::Ttt(st) = ls {
                total += st.window_k.allocated() + st.window_v.allocated();
                total += st.pending_k.allocated() + st.pending_v.allocated();
                total += st.conv_tail.iter().map(|f| f.iter().map(Tensor::len).sum::<usize>()).sum::<usize>();
                let fw = &st.fast_weights;
                total += fw.weights.iter().chain(&fw.momentum).chain(&fw.magnitudes).map(|v| v.value().len()).sum::<usize>();
            }
        }
        total
    }

    /// Scalars held by anchor caches.
    pub fn anchor_state_scalars(&self) -> usize {
        self.layers.iter().map(|ls| if let LayerState::Anchor { k, v, .. } = ls { k.len() + v.len() } else { 0 }).sum()
    }

    /// Every cache, tail and fast weight held by the stream.
    pub fn total_state_scalars(&self) -> usize {
        let windows: usize = self
            .layers
            .iter()
            .map(|ls| if let LayerState::Window { k, v, .. } = ls { k.allocated() + v.allocated() } else { 0 })
            .sum();
        self.ttt_state_scalars() + self.anchor_state_scalars() + windows
    }

    pub fn total_flushes(&self) -> Vec<usize> {
        self.layers.iter().filter_map(|ls| if let LayerState::Ttt(st) = ls { Some(st.flushes) } else { None }).collect()
    }

    pub fn fast_weights(&self) -> Vec<crate::fast_weights::FastWeights<F>> {
        self.layers
            .iter()
            .filter_map(|ls| if let LayerState::Ttt(st) = ls { Some(st.fast_weights.to_state()) } else { None })
            .collect()
    }
}
