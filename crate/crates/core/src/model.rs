//! Hybrid TTT layers, anchor layers and the pre-norm residual stack.
//!
//! Parameters are stored in plain structs that are generic over the leaf
//! type `P`: `Tensor<F>` at rest, `Var<F>` once bound to a tape. The same
//! forward code therefore serves training (recording tape), inference and
//! streaming (non-recording tape).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{full_causal_attn_var, sliding_window_attn_var};
use crate::autodiff::{RopeTable, Tape, Var};
use crate::error::{Error, Result};
use crate::fast_weights::{fw_apply_var, update_var, FastWeights, FwVars, UpdateConfig};
use crate::flops::FlopCategory;
use crate::scalar::Scalar;
use crate::spatial::{dirac_init, geometry, ConvMode, SpatialGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Fast-weight branch in parallel with sliding-window attention.
    Ttt,
    /// Full causal attention over the entire prefix.
    Anchor,
    /// Sliding-window attention alone.
    Window,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Ttt => "ttt",
            LayerKind::Anchor => "anchor",
            LayerKind::Window => "window",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ttt" => Some(LayerKind::Ttt),
            "anchor" => Some(LayerKind::Anchor),
            "window" | "swa" => Some(LayerKind::Window),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackLayout {
    pub pattern: Vec<LayerKind>,
}

impl StackLayout {
    /// `[ttt, ttt, ttt, anchor]` repeated.
    pub fn hybrid(layers: usize) -> Self {
        let pattern = (0..layers).map(|i| if i % 4 == 3 { LayerKind::Anchor } else { LayerKind::Ttt }).collect();
        Self { pattern }
    }

    pub fn uniform(layers: usize, kind: LayerKind) -> Self {
        Self { pattern: vec![kind; layers] }
    }

    /// Every TTT layer reduced to its sliding-window branch.
    pub fn swa_reference(&self) -> Self {
        let pattern = self
            .pattern
            .iter()
            .map(|&k| if k == LayerKind::Ttt { LayerKind::Window } else { k })
            .collect();
        Self { pattern }
    }

    pub fn len(&self) -> usize {
        self.pattern.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.is_empty()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.pattern.iter().filter(|&&k| k == kind).count()
    }

    /// `hybrid`, `ttt`, `anchor`, `window`, or a comma-separated pattern.
    pub fn parse(s: &str, layers: usize) -> Option<Self> {
        match s {
            "hybrid" => Some(Self::hybrid(layers)),
            _ => {
                if let Some(k) = LayerKind::parse(s) {
                    return Some(Self::uniform(layers, k));
                }
                let pattern: Option<Vec<_>> = s.split(',').map(|p| LayerKind::parse(p.trim())).collect();
                pattern.filter(|p| p.len() == layers).map(|pattern| Self { pattern })
            }
        }
    }

    pub fn describe(&self) -> String {
        self.pattern.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
    }
}

/// Architecture and TTT hyper-parameters shared by every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the fast-weight network.
    pub d_h: usize,
    /// Hidden width of the slow feed-forward block.
    pub d_ff: usize,
    pub chunk: usize,
    pub window: usize,
    /// Frame extents, used for the per-cell embedding of visual tokens.
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: [usize; 3],
    pub conv_mode: ConvMode,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub update: UpdateConfig,
    pub layout: StackLayout,
    /// Treat the inputs of every fast-weight update as constants.
    pub detach_updates: bool,
}

impl HybridConfig {
    /// Desk-scale defaults: d = 64, 4 heads, [ttt, ttt, ttt, anchor], b = w = 32.
    pub fn desk(vocab: usize) -> Self {
        Self {
            vocab,
            d: 64,
            heads: 4,
            d_h: 128,
            d_ff: 128,
            chunk: 32,
            window: 32,
            grid_h: 4,
            grid_w: 4,
            kernel: [3, 3, 3],
            conv_mode: ConvMode::CausalTemporal,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            update: UpdateConfig::default(),
            layout: StackLayout::hybrid(4),
            detach_updates: false,
        }
    }

    /// A small configuration for tests.
    pub fn tiny(vocab: usize, d: usize, layers: usize, chunk: usize) -> Self {
        Self {
            d,
            heads: 2,
            d_h: 2 * d,
            d_ff: 2 * d,
            chunk,
            window: chunk,
            grid_h: 2,
            grid_w: 2,
            layout: StackLayout::hybrid(layers),
            ..Self::desk(vocab)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.d == 0 || self.d_h == 0 || self.d_ff == 0 || self.layout.is_empty() {
            return bad("vocab, d, d_h, d_ff and layer count must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 || self.head_dim() % 2 != 0 {
            return bad(format!("d = {} must split into {} heads of even width", self.d, self.heads));
        }
        if self.chunk == 0 {
            return bad("chunk size must be positive".into());
        }
        if self.window < self.chunk {
            return bad(format!("window {} is smaller than chunk {}", self.window, self.chunk));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid extents must be positive".into());
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 1.0) {
            return bad("norm_eps must be positive and rope_theta above 1".into());
        }
        let [kt, kh, kw] = self.kernel;
        dirac_init::<f64>(kt, kh, kw, 1, self.conv_mode)?;
        self.update.validate()
    }
}

/// Parameters that only TTT layers carry.
#[derive(Clone, Debug, PartialEq)]
pub struct TttParams<P> {
    pub scale_q: P,
    pub shift_q: P,
    pub scale_k: P,
    pub shift_k: P,
    /// Depthwise kernels for Q, K, V as `taps × d` matrices.
    pub conv: [P; 3],
    pub gate: P,
    /// Learned starting point of the fast weights, `[W1, W2, W3]`.
    pub fw_init: [P; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub kind: LayerKind,
    pub attn_norm: P,
    /// Shared `d × 3d` projection producing `[Q | K | V]`.
    pub wqkv: P,
    pub wo: P,
    pub ffn_norm: P,
    pub w_gate: P,
    pub w_up: P,
    pub w_down: P,
    pub ttt: Option<TttParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub tok_emb: P,
    pub cell_emb: P,
    pub final_norm: P,
    pub head: P,
    pub layers: Vec<LayerParams<P>>,
}

type MapFn<'a, 'p, P, Q> = dyn FnMut(&str, &'p P) -> Result<Q> + 'a;

impl<P> TttParams<P> {
    fn try_map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> Result<TttParams<Q>> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(TttParams {
            scale_q: f(&n("scale_q"), &self.scale_q)?,
            shift_q: f(&n("shift_q"), &self.shift_q)?,
            scale_k: f(&n("scale_k"), &self.scale_k)?,
            shift_k: f(&n("shift_k"), &self.shift_k)?,
            conv: [
                f(&n("conv_q"), &self.conv[0])?,
                f(&n("conv_k"), &self.conv[1])?,
                f(&n("conv_v"), &self.conv[2])?,
            ],
            gate: f(&n("gate"), &self.gate)?,
            fw_init: [
                f(&n("fw_w1"), &self.fw_init[0])?,
                f(&n("fw_w2"), &self.fw_init[1])?,
                f(&n("fw_w3"), &self.fw_init[2])?,
            ],
        })
    }
}

impl<P> LayerParams<P> {
    pub fn try_map<'p, Q>(&'p self, prefix: &str, f: &mut MapFn<'_, 'p, P, Q>) -> Result<LayerParams<Q>> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(LayerParams {
            kind: self.kind,
            attn_norm: f(&n("attn_norm"), &self.attn_norm)?,
            wqkv: f(&n("wqkv"), &self.wqkv)?,
            wo: f(&n("wo"), &self.wo)?,
            ffn_norm: f(&n("ffn_norm"), &self.ffn_norm)?,
            w_gate: f(&n("w_gate"), &self.w_gate)?,
            w_up: f(&n("w_up"), &self.w_up)?,
            w_down: f(&n("w_down"), &self.w_down)?,
            ttt: match &self.ttt {
                Some(t) => Some(t.try_map(&n("ttt"), f)?),
                None => None,
            },
        })
    }
}

impl<P> ModelParams<P> {
    /// Rebuilds the structure leaf by leaf, visiting leaves in a fixed
    /// order with stable dotted names (`layers.2.ttt.gate`, ...).
    pub fn try_map<'p, Q>(&'p self, f: &mut MapFn<'_, 'p, P, Q>) -> Result<ModelParams<Q>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let tok_emb = f("tok_emb", &self.tok_emb)?;
        let cell_emb = f("cell_emb", &self.cell_emb)?;
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(l.try_map(&format!("layers.{i}"), f)?);
        }
        Ok(ModelParams { tok_emb, cell_emb, final_norm: f("final_norm", &self.final_norm)?, head: f("head", &self.head)?, layers })
    }

    pub fn map<'p, Q>(&'p self, mut f: impl FnMut(&str, &'p P) -> Q) -> ModelParams<Q> {
        self.try_map(&mut |n, p| Ok(f(n, p))).expect("infallible")
    }

    /// Leaves with their names, in [`ModelParams::try_map`] order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|n, p| out.push((n.to_string(), p)));
        out
    }

    pub fn layout(&self) -> StackLayout {
        StackLayout { pattern: self.layers.iter().map(|l| l.kind).collect() }
    }
}

/// Names of parameters introduced by the TTT branch (the second
/// learning-rate group).
pub fn is_ttt_param(name: &str) -> bool {
    name.contains(".ttt.")
}

impl<F: Scalar> ModelParams<Tensor<F>> {
    /// Adds noise to gates, scale/shift and kernels so that every part of
    /// the fast-weight branch affects the output. Used by equivalence and
    /// gradient checks, which are vacuous at the identity init.
    pub fn perturb_ttt<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in &mut self.layers {
            if let Some(t) = &mut l.ttt {
                for x in [&mut t.scale_q, &mut t.shift_q, &mut t.scale_k, &mut t.shift_k, &mut t.gate] {
                    let noise = Tensor::randn(x.shape(), 0.3, rng);
                    x.add_assign(&noise);
                }
                for c in &mut t.conv {
                    let noise = Tensor::randn(c.shape(), 0.2, rng);
                    c.add_assign(&noise);
                }
            }
        }
    }

    /// Initialization under which every TTT layer reproduces its
    /// sliding-window branch exactly: zero gates, unit scale, zero shift,
    /// identity kernels.
    pub fn init<R: Rng + ?Sized>(cfg: &HybridConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let sd = 1.0 / (d as f64).sqrt();
        let [kt, kh, kw] = cfg.kernel;
        // Backbone weights are drawn first and fast weights afterwards, so
        // changing a layer's kind leaves every other draw in place.
        let mut layers = Vec::with_capacity(cfg.layout.len());
        for &kind in &cfg.layout.pattern {
            layers.push(LayerParams {
                kind,
                attn_norm: Tensor::full(&[d], F::one()),
                wqkv: Tensor::randn(&[d, 3 * d], sd, rng),
                wo: Tensor::randn(&[d, d], sd, rng),
                ffn_norm: Tensor::full(&[d], F::one()),
                w_gate: Tensor::randn(&[d, cfg.d_ff], sd, rng),
                w_up: Tensor::randn(&[d, cfg.d_ff], sd, rng),
                w_down: Tensor::randn(&[cfg.d_ff, d], 1.0 / (cfg.d_ff as f64).sqrt(), rng),
                ttt: None,
            });
        }
        let tok_emb = Tensor::randn(&[cfg.vocab, d], 1.0, rng);
        let cell_emb = Tensor::randn(&[cfg.cells(), d], 1.0, rng);
        let head = Tensor::randn(&[d, cfg.vocab], sd, rng);
        for layer in layers.iter_mut().filter(|l| l.kind == LayerKind::Ttt) {
            let dirac = dirac_init::<F>(kt, kh, kw, d, cfg.conv_mode)?.tap_matrix();
            let fw = FastWeights::<F>::random(d, cfg.d_h, rng);
            layer.ttt = Some(TttParams {
                scale_q: Tensor::full(&[d], F::one()),
                shift_q: Tensor::zeros(&[d]),
                scale_k: Tensor::full(&[d], F::one()),
                shift_k: Tensor::zeros(&[d]),
                conv: [dirac.clone(), dirac.clone(), dirac],
                gate: Tensor::zeros(&[d]),
                fw_init: fw.weights,
            });
        }
        Ok(Self { tok_emb, cell_emb, final_norm: Tensor::full(&[d], F::one()), head, layers })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<Tensor<G>> {
        self.map(|_, t| t.cast())
    }

    /// Same parameters with TTT layers reduced to sliding-window layers.
    pub fn swa_reference(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if l.kind == LayerKind::Ttt {
                l.kind = LayerKind::Window;
                l.ttt = None;
            }
        }
        out
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check(&self, cfg: &HybridConfig) -> Result<()> {
        let fresh = ModelParams::<Tensor<F>>::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let want = fresh.named();
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::Checkpoint(format!("{} tensors, configuration implies {}", have.len(), want.len())));
        }
        for ((wn, wt), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(Error::Checkpoint(format!("{hn} {:?} does not match {wn} {:?}", ht.shape(), wt.shape())));
            }
        }
        Ok(())
    }

    /// Binds every leaf to `tape`; `trainable` decides param vs constant.
    pub fn bind(&self, tape: &Tape, mut trainable: impl FnMut(&str) -> bool) -> ModelParams<Var<F>> {
        self.map(|n, t| if trainable(n) { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }
}

/// Root-mean-square normalization with a learned gain.
pub fn rms_norm_var<F: Scalar>(tape: &Tape, x: &Var<F>, gain: &Var<F>, eps: f64) -> Result<Var<F>> {
    let ms = tape.scale(&tape.sum_cols(&tape.mul(x, x)?)?, F::one() / F::of_usize(x.cols()))?;
    let inv = tape.powf(&tape.add_const(&ms, F::of(eps))?, F::of(-0.5))?;
    tape.mul_row(&tape.mul_col(x, &inv)?, gain)
}

/// Slow SwiGLU feed-forward block.
pub fn ffn_var<F: Scalar>(tape: &Tape, p: &LayerParams<Var<F>>, x: &Var<F>) -> Result<Var<F>> {
    let g = tape.matmul(x, &p.w_gate)?;
    let u = tape.matmul(x, &p.w_up)?;
    tape.matmul(&tape.mul(&tape.silu(&g)?, &u)?, &p.w_down)
}

/// Token embedding plus a per-cell embedding on visual tokens.
pub fn embed_var<F: Scalar>(tape: &Tape, params: &ModelParams<Var<F>>, ids: &[usize], grid: &SpatialGrid) -> Result<Var<F>> {
    let vocab = params.tok_emb.rows();
    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
        return Err(Error::shape("embed", format!("token {bad} outside vocabulary of {vocab}")));
    }
    if grid.stream_len() != ids.len() {
        return Err(Error::Grid(format!("grid covers {} tokens, stream has {}", grid.stream_len(), ids.len())));
    }
    let tok = tape.gather_rows(&params.tok_emb, ids)?;
    if grid.num_visual() == 0 {
        return Ok(tok);
    }
    let vis = grid.visual_positions();
    let cells: Vec<usize> = vis.iter().map(|&p| grid.cell_of(p).expect("visual")).collect();
    if cells.iter().any(|&c| c >= params.cell_emb.rows()) {
        return Err(Error::Grid("grid frames exceed the configured cell embedding".into()));
    }
    let with_cell = tape.add(&tape.gather_rows(&tok, vis)?, &tape.gather_rows(&params.cell_emb, &cells)?)?;
    tape.scatter_rows(&tok, &with_cell, vis)
}

/// `[Q | K | V]` from the shared projection, counted as one instrumented call.
pub fn qkv_var<F: Scalar>(tape: &Tape, p: &LayerParams<Var<F>>, x: &Var<F>) -> Result<[Var<F>; 3]> {
    tape.note("qkv_projection");
    let qkv = tape.matmul(x, &p.wqkv)?;
    let d = x.cols();
    Ok([tape.slice_cols(&qkv, 0, d)?, tape.slice_cols(&qkv, d, d)?, tape.slice_cols(&qkv, 2 * d, d)?])
}

/// TTT-branch Q and K after the learned scale and shift.
pub fn qk_shift_var<F: Scalar>(tape: &Tape, t: &TttParams<Var<F>>, q: &Var<F>, k: &Var<F>) -> Result<(Var<F>, Var<F>)> {
    let qs = tape.add_row(&tape.mul_row(q, &t.scale_q)?, &t.shift_q)?;
    let ks = tape.add_row(&tape.mul_row(k, &t.scale_k)?, &t.shift_k)?;
    Ok((qs, ks))
}

/// Pack, convolve and scatter one projection.
pub fn spatial_conv_var<F: Scalar>(
    tape: &Tape,
    x: &Var<F>,
    kernel: &Var<F>,
    grid: &SpatialGrid,
    cfg: &HybridConfig,
) -> Result<Var<F>> {
    if grid.num_visual() == 0 {
        return Ok(x.clone());
    }
    let [kt, kh, kw] = cfg.kernel;
    let geom = geometry(kt, kh, kw, cfg.conv_mode, grid.frames(), grid.height(), grid.width());
    let _cat = tape.category(FlopCategory::Conv);
    let vol = tape.gather_rows(x, grid.visual_positions())?;
    let out = tape.conv3d(&vol, kernel, geom)?;
    tape.scatter_rows(x, &out, grid.visual_positions())
}

/// Chunked apply-then-update over `(Q̃, K̃, Ṽ)`; the tail is apply-only.
pub fn ttt_chunks_var<F: Scalar>(
    tape: &Tape,
    mut fw: FwVars<F>,
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    cfg: &HybridConfig,
) -> Result<(Var<F>, FwVars<F>)> {
    let (n, b) = (q.rows(), cfg.chunk);
    let mut outs = Vec::with_capacity(n / b + 1);
    let mut s = 0;
    while s < n {
        let len = b.min(n - s);
        let whole = s == 0 && len == n;
        let qi = if whole { q.clone() } else { tape.slice_rows(q, s, len)? };
        outs.push(fw_apply_var(tape, &fw.weights, &qi)?);
        if len == b {
            let (mut ki, mut vi) = if whole { (k.clone(), v.clone()) } else { (tape.slice_rows(k, s, b)?, tape.slice_rows(v, s, b)?) };
            if cfg.detach_updates {
                ki = tape.constant(ki.value().clone());
                vi = tape.constant(vi.value().clone());
                fw = detach(tape, &fw);
            }
            fw = update_var(tape, &fw, &ki, &vi, &cfg.update)?;
        }
        s += len;
    }
    Ok((tape.concat_rows(&outs)?, fw))
}

fn detach<F: Scalar>(tape: &Tape, fw: &FwVars<F>) -> FwVars<F> {
    let c = |v: &Var<F>| tape.constant(v.value().clone());
    FwVars {
        weights: [c(&fw.weights[0]), c(&fw.weights[1]), c(&fw.weights[2])],
        momentum: [c(&fw.momentum[0]), c(&fw.momentum[1]), c(&fw.momentum[2])],
        magnitudes: [c(&fw.magnitudes[0]), c(&fw.magnitudes[1]), c(&fw.magnitudes[2])],
    }
}

/// Rotary table for positions `0..n`.
pub fn rope_table(cfg: &HybridConfig, start: usize, n: usize) -> Rc<RopeTable> {
    let pos: Vec<usize> = (start..start + n).collect();
    Rc::new(RopeTable::new(&pos, cfg.heads, cfg.head_dim(), cfg.rope_theta))
}

/// One hybrid layer's mixing block over the normalized input `x`: the
/// fast-weight branch (scale/shift, spatial conv, chunked apply/update,
/// gate) plus sliding-window attention on the unshifted projections.
pub fn ttt_prefill_var<F: Scalar>(
    tape: &Tape,
    p: &LayerParams<Var<F>>,
    fw: FwVars<F>,
    x: &Var<F>,
    grid: &SpatialGrid,
    cfg: &HybridConfig,
    rope: &Rc<RopeTable>,
) -> Result<(Var<F>, FwVars<F>)> {
    let t = p.ttt.as_ref().ok_or_else(|| Error::Config("ttt_prefill on a layer without TTT parameters".into()))?;
    if cfg.window < cfg.chunk {
        return Err(Error::Config(format!("window {} is smaller than chunk {}", cfg.window, cfg.chunk)));
    }
    if grid.stream_len() != x.rows() {
        return Err(Error::Grid(format!("grid covers {} tokens, input has {}", grid.stream_len(), x.rows())));
    }
    let [q, k, v] = qkv_var(tape, p, x)?;
    let (qs, ks) = qk_shift_var(tape, t, &q, &k)?;
    let qc = spatial_conv_var(tape, &qs, &t.conv[0], grid, cfg)?;
    let kc = spatial_conv_var(tape, &ks, &t.conv[1], grid, cfg)?;
    let vc = spatial_conv_var(tape, &v, &t.conv[2], grid, cfg)?;
    let (o_ttt, fw) = ttt_chunks_var(tape, fw, &qc, &kc, &vc, cfg)?;
    let gated = tape.mul_row(&o_ttt, &t.gate)?;
    let attn = sliding_window_attn_var(tape, &tape.rope(&q, rope.clone())?, &tape.rope(&k, rope.clone())?, &v, cfg.heads, cfg.window)?;
    let out = tape.matmul(&tape.add(&gated, &attn)?, &p.wo)?;
    Ok((out, fw))
}

/// Mixing block of an attention-only layer.
pub fn attention_mix_var<F: Scalar>(
    tape: &Tape,
    p: &LayerParams<Var<F>>,
    x: &Var<F>,
    cfg: &HybridConfig,
    rope: &Rc<RopeTable>,
) -> Result<Var<F>> {
    let [q, k, v] = qkv_var(tape, p, x)?;
    let (qr, kr) = (tape.rope(&q, rope.clone())?, tape.rope(&k, rope.clone())?);
    let attn = match p.kind {
        LayerKind::Anchor => full_causal_attn_var(tape, &qr, &kr, &v, cfg.heads)?,
        _ => sliding_window_attn_var(tape, &qr, &kr, &v, cfg.heads, cfg.window)?,
    };
    tape.matmul(&attn, &p.wo)
}

pub struct StackOutput<F> {
    /// Residual stream after the last layer (before the final norm).
    pub hidden: Var<F>,
    /// Final fast weights of every TTT layer (`None` elsewhere).
    pub fast_weights: Vec<Option<FwVars<F>>>,
}

/// Embeds `ids` and runs every layer: `h = x + Mix(norm x)`,
/// `x' = h + FFN(norm h)`.
pub fn stack_forward_var<F: Scalar>(
    tape: &Tape,
    params: &ModelParams<Var<F>>,
    ids: &[usize],
    grid: &SpatialGrid,
    cfg: &HybridConfig,
) -> Result<StackOutput<F>> {
    if params.layers.len() != cfg.layout.len() || params.layers.iter().zip(&cfg.layout.pattern).any(|(l, &k)| l.kind != k) {
        return Err(Error::Config(format!(
            "parameters are laid out as [{}], configuration says [{}]",
            params.layout().describe(),
            cfg.layout.describe()
        )));
    }
    if ids.is_empty() {
        return Err(Error::shape("stack_forward", "empty input"));
    }
    let grid = if grid.stream_len() < ids.len() { grid.extended(ids.len())? } else { grid.clone() };
    let rope = rope_table(cfg, 0, ids.len());
    let mut x = embed_var(tape, params, ids, &grid)?;
    let mut fws = Vec::with_capacity(params.layers.len());
    for p in &params.layers {
        let h = rms_norm_var(tape, &x, &p.attn_norm, cfg.norm_eps)?;
        let mixed = match (&p.kind, &p.ttt) {
            (LayerKind::Ttt, Some(t)) => {
                let fw0 = FwVars::start(tape, &t.fw_init)?;
                let (out, fw) = ttt_prefill_var(tape, p, fw0, &h, &grid, cfg, &rope)?;
                fws.push(Some(fw));
                out
            }
            (LayerKind::Ttt, None) => return Err(Error::Config("TTT layer without TTT parameters".into())),
            _ => {
                fws.push(None);
                attention_mix_var(tape, p, &h, cfg, &rope)?
            }
        };
        let x1 = tape.add(&x, &mixed)?;
        let f = ffn_var(tape, p, &rms_norm_var(tape, &x1, &p.ffn_norm, cfg.norm_eps)?)?;
        x = tape.add(&x1, &f)?;
    }
    Ok(StackOutput { hidden: x, fast_weights: fws })
}

/// Logits for the chosen rows of the residual stream.
pub fn logits_var<F: Scalar>(
    tape: &Tape,
    params: &ModelParams<Var<F>>,
    hidden: &Var<F>,
    rows: &[usize],
    eps: f64,
) -> Result<Var<F>> {
    let picked = if rows.len() == hidden.rows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        hidden.clone()
    } else {
        tape.gather_rows(hidden, rows)?
    };
    let h = rms_norm_var(tape, &picked, &params.final_norm, eps)?;
    tape.matmul(&h, &params.head)
}

/// Tensor-level hybrid layer: returns the mixing output and the fast
/// weights after the last full chunk.
pub fn ttt_prefill<F: Scalar>(
    params: &LayerParams<Tensor<F>>,
    fw: &FastWeights<F>,
    x: &Tensor<F>,
    grid: &SpatialGrid,
    cfg: &HybridConfig,
) -> Result<(Tensor<F>, FastWeights<F>)> {
    let tape = Tape::no_grad();
    let lp = params.try_map("layer", &mut |_, t: &Tensor<F>| Ok(tape.constant(t.clone())))?;
    let fwv = FwVars::from_state(&tape, fw);
    let rope = rope_table(cfg, 0, x.rows());
    let (out, fw) = ttt_prefill_var(&tape, &lp, fwv, &tape.constant(x.as_matrix()), grid, cfg, &rope)?;
    Ok((out.value().clone(), fw.to_state()))
}

/// Tensor-level stack: final residual stream and per-layer fast weights.
pub fn stack_forward<F: Scalar>(
    params: &ModelParams<Tensor<F>>,
    ids: &[usize],
    grid: &SpatialGrid,
    cfg: &HybridConfig,
) -> Result<(Tensor<F>, Vec<Option<FastWeights<F>>>)> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape, |_| false);
    let out = stack_forward_var(&tape, &bound, ids, grid, cfg)?;
    Ok((out.hidden.value().clone(), out.fast_weights.iter().map(|f| f.as_ref().map(FwVars::to_state)).collect()))
}
