//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every tracked operation is a primitive (matmul, elementwise maps,
//! broadcasts, reductions, gather/scatter, convolution). Composite pieces
//! such as attention or the SwiGLU memory are spelled out in terms of these
//! primitives by their callers, so the backward surface stays small.
//!
//! Nodes are numbered in recording order. [`Tape::backward`] walks the
//! nodes reachable from the loss in strictly decreasing order, which is the
//! exact reverse of recording. A tape built with [`Tape::no_grad`] records
//! nothing: intermediates are freed as soon as their handles drop, which is
//! what inference and the complexity probe use.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::flops::{FlopCategory, FlopCounter};
use crate::scalar::Scalar;
use crate::spatial::{conv3d_backward, conv3d_forward, ConvGeometry};
use crate::tensor::{
    silu_prime_scalar, silu_scalar, silu_second_scalar, softmax_rows_raw, Mask, Tensor,
};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

struct TapeState {
    id: usize,
    next_node: Cell<usize>,
    tracking: Cell<bool>,
    flops: RefCell<FlopCounter>,
    category: Cell<FlopCategory>,
    events: RefCell<BTreeMap<&'static str, usize>>,
}

/// Records primitive operations for later differentiation and books every
/// multiply-accumulate in a [`FlopCounter`].
#[derive(Clone)]
pub struct Tape {
    state: Rc<TapeState>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Restores the previous FLOP category when dropped.
pub struct CategoryGuard {
    state: Rc<TapeState>,
    previous: FlopCategory,
}

impl Drop for CategoryGuard {
    fn drop(&mut self) {
        self.state.category.set(self.previous);
    }
}

struct Node<F> {
    id: usize,
    tape: usize,
    value: Tensor<F>,
    requires_grad: bool,
    op: Option<Op<F>>,
}

/// Handle to a value on a [`Tape`]. Cloning is cheap.
pub struct Var<F> {
    node: Rc<Node<F>>,
}

impl<F> Clone for Var<F> {
    fn clone(&self) -> Self {
        Self { node: Rc::clone(&self.node) }
    }
}

impl<F: Scalar> Var<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.node.value
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.node.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.node.value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> F {
        self.node.value.data()[0]
    }
}

enum Op<F> {
    MatMul { a: Var<F>, b: Var<F>, ta: bool, tb: bool },
    Add(Var<F>, Var<F>),
    Sub(Var<F>, Var<F>),
    Mul(Var<F>, Var<F>),
    Scale(Var<F>, F),
    AddConst(Var<F>),
    MulScalar(Var<F>, Var<F>),
    AddRow(Var<F>, Var<F>),
    MulRow(Var<F>, Var<F>),
    MulCol(Var<F>, Var<F>),
    Powf(Var<F>, F),
    Silu(Var<F>),
    SiluPrime(Var<F>),
    SumAll(Var<F>),
    SumCols(Var<F>),
    Softmax(Var<F>),
    CrossEntropy { logits: Var<F>, targets: Rc<Vec<usize>> },
    Gather { a: Var<F>, idx: Rc<Vec<usize>> },
    SliceRows { a: Var<F>, start: usize },
    SliceCols { a: Var<F>, start: usize },
    ConcatRows(Vec<Var<F>>),
    ConcatCols(Vec<Var<F>>),
    ScatterRows { base: Var<F>, rows: Var<F>, idx: Rc<Vec<usize>> },
    Rope { a: Var<F>, table: Rc<RopeTable> },
    Conv3d { vol: Var<F>, kernel: Var<F>, geom: ConvGeometry },
}

impl<F: Scalar> Op<F> {
    fn parents(&self) -> Vec<&Var<F>> {
        match self {
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::ScatterRows { base: a, rows: b, .. }
            | Op::Conv3d { vol: a, kernel: b, .. } => vec![a, b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Powf(a, _)
            | Op::Silu(a)
            | Op::SiluPrime(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::Softmax(a)
            | Op::CrossEntropy { logits: a, .. }
            | Op::Gather { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Rope { a, .. } => vec![a],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
        }
    }

    /// Gradients for each parent (same order as [`Op::parents`]).
    fn backward(&self, out: &Tensor<F>, g: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        Ok(match self {
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (a.value(), b.value());
                let (da, db) = match (ta, tb) {
                    (false, false) => (g.matmul_t(false, bv, true)?, av.matmul_t(true, g, false)?),
                    (true, false) => (bv.matmul_t(false, g, true)?, av.matmul_t(false, g, false)?),
                    (false, true) => (g.matmul_t(false, bv, false)?, g.matmul_t(true, av, false)?),
                    (true, true) => (bv.matmul_t(true, g, true)?, g.matmul_t(true, av, true)?),
                };
                vec![da, db]
            }
            Op::Add(_, _) => vec![g.clone(), g.clone()],
            Op::Sub(_, _) => vec![g.clone(), g.map(|x| -x)],
            Op::Mul(a, b) => vec![g.zip_map(b.value(), |x, y| x * y), g.zip_map(a.value(), |x, y| x * y)],
            Op::Scale(_, c) => vec![g.scale(*c)],
            Op::AddConst(_) => vec![g.clone()],
            Op::MulScalar(a, s) => {
                let sv = s.item();
                let ds: F = g.data().iter().zip(a.value().data()).map(|(&x, &y)| x * y).sum();
                vec![g.scale(sv), Tensor::new(s.shape(), vec![ds])?]
            }
            Op::AddRow(_, v) => {
                let c = g.cols();
                let mut dv = vec![F::zero(); c];
                for i in 0..g.rows() {
                    for (d, &x) in dv.iter_mut().zip(g.row(i)) {
                        *d = *d + x;
                    }
                }
                vec![g.clone(), Tensor::new(v.shape(), dv)?]
            }
            Op::MulRow(a, v) => {
                let c = g.cols();
                let vd = v.value().data();
                let mut da = g.clone();
                let mut dv = vec![F::zero(); c];
                let ad = a.value().data();
                for i in 0..g.rows() {
                    for j in 0..c {
                        let k = i * c + j;
                        da.data_mut()[k] = g.data()[k] * vd[j];
                        dv[j] = dv[j] + g.data()[k] * ad[k];
                    }
                }
                vec![da, Tensor::new(v.shape(), dv)?]
            }
            Op::MulCol(a, col) => {
                let c = g.cols();
                let cd = col.value().data();
                let ad = a.value().data();
                let mut da = g.clone();
                let mut dc = vec![F::zero(); g.rows()];
                for i in 0..g.rows() {
                    for j in 0..c {
                        let k = i * c + j;
                        da.data_mut()[k] = g.data()[k] * cd[i];
                        dc[i] = dc[i] + g.data()[k] * ad[k];
                    }
                }
                vec![da, Tensor::new(col.shape(), dc)?]
            }
            Op::Powf(a, p) => {
                let p = *p;
                vec![Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(a.value().data())
                        .map(|(&gi, &x)| gi * p * x.powf(p - F::one()))
                        .collect(),
                )?]
            }
            Op::Silu(a) => vec![g.zip_map(a.value(), |gi, x| gi * silu_prime_scalar(x))],
            Op::SiluPrime(a) => vec![g.zip_map(a.value(), |gi, x| gi * silu_second_scalar(x))],
            Op::SumAll(a) => vec![Tensor::full(a.shape(), g.data()[0])],
            Op::SumCols(a) => {
                let av = a.value();
                let c = av.cols();
                let mut da = Tensor::zeros(av.shape());
                for i in 0..av.rows() {
                    let gi = g.data()[i];
                    for v in &mut da.data_mut()[i * c..(i + 1) * c] {
                        *v = gi;
                    }
                }
                vec![da]
            }
            Op::Softmax(_) => {
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let c = out.cols();
                let mut ds = Tensor::zeros(out.shape());
                for i in 0..out.rows() {
                    let p = out.row(i);
                    let gr = g.row(i);
                    let dot: F = p.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for j in 0..c {
                        ds.data_mut()[i * c + j] = p[j] * (gr[j] - dot);
                    }
                }
                vec![ds]
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = logits.value();
                let probs = softmax_rows_raw(lv, &Mask::all(lv.rows(), lv.cols()))?;
                let scale = g.data()[0] / F::of_usize(targets.len().max(1));
                let c = lv.cols();
                let mut d = probs;
                for (i, &t) in targets.iter().enumerate() {
                    d.data_mut()[i * c + t] = d.data()[i * c + t] - F::one();
                }
                vec![d.scale(scale)]
            }
            Op::Gather { a, idx } => {
                let av = a.value();
                let c = av.cols();
                let mut da = Tensor::zeros(av.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        let k = i * c + j;
                        da.data_mut()[k] = da.data()[k] + g.data()[r * c + j];
                    }
                }
                vec![da]
            }
            Op::SliceRows { a, start } => {
                let av = a.value();
                let c = av.cols();
                let mut da = Tensor::zeros(av.shape());
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![da]
            }
            Op::SliceCols { a, start } => {
                let av = a.value();
                let (c, w) = (av.cols(), g.cols());
                let mut da = Tensor::zeros(av.shape());
                for i in 0..av.rows() {
                    da.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                vec![da]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let r = p.rows();
                        let t = g.slice_rows(offset, r).reshape(p.shape());
                        offset += r;
                        t
                    })
                    .collect::<Result<_>>()?
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = p.cols();
                        let t = g.slice_cols(offset, w).reshape(p.shape());
                        offset += w;
                        t
                    })
                    .collect::<Result<_>>()?
            }
            Op::ScatterRows { rows, idx, .. } => {
                let c = g.cols();
                let mut dbase = g.clone();
                for &i in idx.iter() {
                    for v in &mut dbase.data_mut()[i * c..(i + 1) * c] {
                        *v = F::zero();
                    }
                }
                let drows = g.gather_rows(idx)?.reshape(rows.shape())?;
                vec![dbase, drows]
            }
            Op::Rope { table, .. } => vec![table.apply(g, true)],
            Op::Conv3d { vol, kernel, geom } => {
                let (dv, dk) = conv3d_backward(vol.value(), kernel.value(), g, geom);
                vec![dv, dk]
            }
        })
    }
}

/// Precomputed rotation angles for rotary position encoding.
pub struct RopeTable {
    heads: usize,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// Rows are tokens at `positions`; every head's pairs `(2i, 2i+1)` are
    /// rotated by `pos · theta^(−2i/head_dim)`.
    pub fn new(positions: &[usize], heads: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = theta.powf(-(2.0 * i as f64) / head_dim as f64);
                let ang = p as f64 * freq;
                cos.push(ang.cos());
                sin.push(ang.sin());
            }
        }
        Self { heads, head_dim, cos, sin }
    }

    fn apply<F: Scalar>(&self, x: &Tensor<F>, inverse: bool) -> Tensor<F> {
        let c = x.cols();
        let half = self.head_dim / 2;
        let mut out = x.clone();
        for r in 0..x.rows() {
            for h in 0..self.heads {
                for i in 0..half {
                    let (co, si) = (F::of(self.cos[r * half + i]), F::of(self.sin[r * half + i]));
                    let si = if inverse { -si } else { si };
                    let k0 = r * c + h * self.head_dim + 2 * i;
                    let (a, b) = (x.data()[k0], x.data()[k0 + 1]);
                    out.data_mut()[k0] = a * co - b * si;
                    out.data_mut()[k0 + 1] = a * si + b * co;
                }
            }
        }
        out
    }
}

/// Gradients of a loss with respect to the tracked leaves.
pub struct Gradients<F> {
    grads: HashMap<usize, Tensor<F>>,
    order: Vec<usize>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`; exactly zero when `v` did not influence the loss.
    pub fn get(&self, v: &Var<F>) -> Tensor<F> {
        self.grads.get(&v.id()).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn has(&self, v: &Var<F>) -> bool {
        self.grads.contains_key(&v.id())
    }

    /// Node ids of the operations visited during the backward sweep.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_tracking(true)
    }

    /// A tape that records no graph; only values and FLOPs are produced.
    pub fn no_grad() -> Self {
        Self::with_tracking(false)
    }

    fn with_tracking(tracking: bool) -> Self {
        Self {
            state: Rc::new(TapeState {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                next_node: Cell::new(0),
                tracking: Cell::new(tracking),
                flops: RefCell::new(FlopCounter::new()),
                category: Cell::new(FlopCategory::Projection),
                events: RefCell::new(BTreeMap::new()),
            }),
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.state.tracking.get()
    }

    pub fn flops(&self) -> FlopCounter {
        *self.state.flops.borrow()
    }

    pub fn reset_flops(&self) {
        self.state.flops.borrow_mut().reset();
    }

    /// Books subsequent MACs under `category` until the guard drops.
    pub fn category(&self, category: FlopCategory) -> CategoryGuard {
        let previous = self.state.category.replace(category);
        CategoryGuard { state: Rc::clone(&self.state), previous }
    }

    /// Counts an instrumentation event (e.g. one QKV projection).
    pub fn note(&self, event: &'static str) {
        *self.state.events.borrow_mut().entry(event).or_insert(0) += 1;
    }

    pub fn event_count(&self, event: &str) -> usize {
        self.state.events.borrow().get(event).copied().unwrap_or(0)
    }

    fn book(&self, macs: usize) {
        self.state.flops.borrow_mut().add(self.state.category.get(), macs as u64);
    }

    fn leaf<F: Scalar>(&self, value: Tensor<F>, requires_grad: bool) -> Var<F> {
        let id = self.state.next_node.get();
        self.state.next_node.set(id + 1);
        Var {
            node: Rc::new(Node { id, tape: self.state.id, value, requires_grad, op: None }),
        }
    }

    /// A differentiable leaf (only when the tape is tracking).
    pub fn param<F: Scalar>(&self, value: Tensor<F>) -> Var<F> {
        let tracking = self.is_tracking();
        self.leaf(value, tracking)
    }

    pub fn constant<F: Scalar>(&self, value: Tensor<F>) -> Var<F> {
        self.leaf(value, false)
    }

    fn push<F: Scalar>(&self, name: &'static str, value: Tensor<F>, op: Op<F>) -> Result<Var<F>> {
        value.ensure_finite(name)?;
        let requires_grad = self.is_tracking() && op.parents().iter().any(|p| p.requires_grad());
        let id = self.state.next_node.get();
        self.state.next_node.set(id + 1);
        Ok(Var {
            node: Rc::new(Node {
                id,
                tape: self.state.id,
                value,
                requires_grad,
                op: if requires_grad { Some(op) } else { None },
            }),
        })
    }

    /// `op(a) · op(b)`, booking `m·k·n` MACs.
    pub fn matmul_t<F: Scalar>(&self, a: &Var<F>, ta: bool, b: &Var<F>, tb: bool) -> Result<Var<F>> {
        let out = a.value().matmul_t(ta, b.value(), tb)?;
        let k = if ta { a.rows() } else { a.cols() };
        self.book(out.rows() * k * out.cols());
        self.push("matmul", out, Op::MatMul { a: a.clone(), b: b.clone(), ta, tb })
    }

    pub fn matmul<F: Scalar>(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.matmul_t(a, false, b, false)
    }

    fn same_shape<F: Scalar>(&self, op: &'static str, a: &Var<F>, b: &Var<F>) -> Result<()> {
        if a.value().len() != b.value().len() || a.cols() != b.cols() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add<F: Scalar>(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.same_shape("add", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        self.push("add", out, Op::Add(a.clone(), b.clone()))
    }

    pub fn sub<F: Scalar>(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.same_shape("sub", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        self.push("sub", out, Op::Sub(a.clone(), b.clone()))
    }

    pub fn mul<F: Scalar>(&self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        self.same_shape("mul", a, b)?;
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        self.push("mul", out, Op::Mul(a.clone(), b.clone()))
    }

    pub fn scale<F: Scalar>(&self, a: &Var<F>, c: F) -> Result<Var<F>> {
        self.push("scale", a.value().scale(c), Op::Scale(a.clone(), c))
    }

    pub fn add_const<F: Scalar>(&self, a: &Var<F>, c: F) -> Result<Var<F>> {
        self.push("add_const", a.value().map(|x| x + c), Op::AddConst(a.clone()))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn mul_scalar<F: Scalar>(&self, a: &Var<F>, s: &Var<F>) -> Result<Var<F>> {
        if s.value().len() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar has shape {:?}", s.shape())));
        }
        let sv = s.item();
        self.push("mul_scalar", a.value().scale(sv), Op::MulScalar(a.clone(), s.clone()))
    }

    fn check_row_vec<F: Scalar>(&self, op: &'static str, a: &Var<F>, v: &Var<F>) -> Result<()> {
        if v.value().len() != a.cols() {
            return Err(Error::shape(op, format!("vector of {} for {} columns", v.value().len(), a.cols())));
        }
        Ok(())
    }

    /// `a + v` with `v` broadcast over rows.
    pub fn add_row<F: Scalar>(&self, a: &Var<F>, v: &Var<F>) -> Result<Var<F>> {
        self.check_row_vec("add_row", a, v)?;
        let c = a.cols();
        let vd = v.value().data();
        let mut out = a.value().clone();
        for (k, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x + vd[k % c];
        }
        self.push("add_row", out, Op::AddRow(a.clone(), v.clone()))
    }

    /// `a ⊙ v` with `v` broadcast over rows.
    pub fn mul_row<F: Scalar>(&self, a: &Var<F>, v: &Var<F>) -> Result<Var<F>> {
        self.check_row_vec("mul_row", a, v)?;
        let c = a.cols();
        let vd = v.value().data();
        let mut out = a.value().clone();
        for (k, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x * vd[k % c];
        }
        self.push("mul_row", out, Op::MulRow(a.clone(), v.clone()))
    }

    /// `a ⊙ c` with the column vector `c` broadcast over columns.
    pub fn mul_col<F: Scalar>(&self, a: &Var<F>, col: &Var<F>) -> Result<Var<F>> {
        if col.value().len() != a.rows() {
            return Err(Error::shape("mul_col", format!("vector of {} for {} rows", col.value().len(), a.rows())));
        }
        let c = a.cols();
        let cd = col.value().data();
        let mut out = a.value().clone();
        for (k, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x * cd[k / c];
        }
        self.push("mul_col", out, Op::MulCol(a.clone(), col.clone()))
    }

    pub fn powf<F: Scalar>(&self, a: &Var<F>, p: F) -> Result<Var<F>> {
        self.push("powf", a.value().map(|x| x.powf(p)), Op::Powf(a.clone(), p))
    }

    pub fn silu<F: Scalar>(&self, a: &Var<F>) -> Result<Var<F>> {
        self.push("silu", a.value().map(silu_scalar), Op::Silu(a.clone()))
    }

    /// Elementwise derivative of SiLU (needed to write the fast-weight
    /// gradient in primitives and differentiate through it).
    pub fn silu_prime<F: Scalar>(&self, a: &Var<F>) -> Result<Var<F>> {
        self.push("silu_prime", a.value().map(silu_prime_scalar), Op::SiluPrime(a.clone()))
    }

    pub fn sum<F: Scalar>(&self, a: &Var<F>) -> Result<Var<F>> {
        self.push("sum", Tensor::scalar(a.value().sum()), Op::SumAll(a.clone()))
    }

    /// Per-row sums as an `rows × 1` column.
    pub fn sum_cols<F: Scalar>(&self, a: &Var<F>) -> Result<Var<F>> {
        let av = a.value();
        let sums = (0..av.rows()).map(|i| av.row(i).iter().copied().sum()).collect();
        self.push("sum_cols", Tensor::new(&[av.rows(), 1], sums)?, Op::SumCols(a.clone()))
    }

    pub fn softmax_rows<F: Scalar>(&self, a: &Var<F>, mask: &Mask) -> Result<Var<F>> {
        let out = softmax_rows_raw(a.value(), mask)?;
        self.push("softmax_rows", out, Op::Softmax(a.clone()))
    }

    /// Mean negative log-likelihood of `targets` (one per row of `logits`).
    pub fn cross_entropy<F: Scalar>(&self, logits: &Var<F>, targets: &[usize]) -> Result<Var<F>> {
        let lv = logits.value();
        if targets.len() != lv.rows() || targets.iter().any(|&t| t >= lv.cols()) {
            return Err(Error::shape("cross_entropy", format!("{} targets for {:?}", targets.len(), lv.shape())));
        }
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            total = total + lse - row[t];
        }
        let loss = total / F::of_usize(targets.len().max(1));
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.clone(), targets: Rc::new(targets.to_vec()) },
        )
    }

    pub fn gather_rows<F: Scalar>(&self, a: &Var<F>, idx: &[usize]) -> Result<Var<F>> {
        let out = a.value().gather_rows(idx)?;
        self.push("gather_rows", out, Op::Gather { a: a.clone(), idx: Rc::new(idx.to_vec()) })
    }

    pub fn slice_rows<F: Scalar>(&self, a: &Var<F>, start: usize, len: usize) -> Result<Var<F>> {
        if start + len > a.rows() {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {}", a.rows())));
        }
        let out = a.value().slice_rows(start, len);
        self.push("slice_rows", out, Op::SliceRows { a: a.clone(), start })
    }

    pub fn slice_cols<F: Scalar>(&self, a: &Var<F>, start: usize, len: usize) -> Result<Var<F>> {
        if start + len > a.cols() {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {}", a.cols())));
        }
        let out = a.value().slice_cols(start, len);
        self.push("slice_cols", out, Op::SliceCols { a: a.clone(), start })
    }

    pub fn concat_rows<F: Scalar>(&self, parts: &[Var<F>]) -> Result<Var<F>> {
        if parts.len() == 1 {
            return Ok(parts[0].clone());
        }
        let vals: Vec<&Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_rows(&vals)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols<F: Scalar>(&self, parts: &[Var<F>]) -> Result<Var<F>> {
        if parts.len() == 1 {
            return Ok(parts[0].clone());
        }
        let vals: Vec<&Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_cols(&vals)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Copy of `base` whose rows `idx[r]` are replaced by row `r` of `rows`.
    pub fn scatter_rows<F: Scalar>(&self, base: &Var<F>, rows: &Var<F>, idx: &[usize]) -> Result<Var<F>> {
        let c = base.cols();
        if rows.cols() != c || rows.rows() != idx.len() || idx.iter().any(|&i| i >= base.rows()) {
            return Err(Error::shape(
                "scatter_rows",
                format!("{:?} rows into {:?} at {} indices", rows.shape(), base.shape(), idx.len()),
            ));
        }
        let mut out = base.value().as_matrix();
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(rows.value().row(r));
        }
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows { base: base.clone(), rows: rows.clone(), idx: Rc::new(idx.to_vec()) },
        )
    }

    pub fn rope<F: Scalar>(&self, a: &Var<F>, table: Rc<RopeTable>) -> Result<Var<F>> {
        if table.heads * table.head_dim != a.cols() || table.cos.len() != a.rows() * (table.head_dim / 2) {
            return Err(Error::shape("rope", format!("table does not fit {:?}", a.shape())));
        }
        let out = table.apply(a.value(), false);
        self.push("rope", out, Op::Rope { a: a.clone(), table })
    }

    /// Depthwise 3-D convolution of a packed volume (`voxels × channels`).
    pub fn conv3d<F: Scalar>(&self, vol: &Var<F>, kernel: &Var<F>, geom: ConvGeometry) -> Result<Var<F>> {
        let out = conv3d_forward(vol.value(), kernel.value(), &geom)?;
        self.book(geom.macs(vol.cols()));
        self.push("conv3d", out, Op::Conv3d { vol: vol.clone(), kernel: kernel.clone(), geom })
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward<F: Scalar>(&self, loss: &Var<F>) -> Result<Gradients<F>> {
        if loss.node.tape != self.state.id {
            return Err(Error::LossNotOnTape);
        }
        if loss.value().len() != 1 {
            return Err(Error::NonScalarLoss { len: loss.value().len() });
        }
        let mut out = Gradients { grads: HashMap::new(), order: Vec::new() };
        if !loss.requires_grad() {
            return Ok(out);
        }

        let mut seen = HashSet::new();
        let mut stack = vec![loss.clone()];
        let mut nodes = Vec::new();
        seen.insert(loss.id());
        while let Some(v) = stack.pop() {
            if let Some(op) = &v.node.op {
                for p in op.parents() {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(v);
        }
        nodes.sort_unstable_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<usize, Tensor<F>> = HashMap::new();
        pending.insert(loss.id(), Tensor::full(loss.shape(), F::one()));
        for v in &nodes {
            let Some(g) = pending.remove(&v.id()) else { continue };
            match &v.node.op {
                None => {
                    out.grads.insert(v.id(), g);
                }
                Some(op) => {
                    out.order.push(v.id());
                    let parent_grads = op.backward(&v.node.value, &g)?;
                    for (p, pg) in op.parents().into_iter().zip(parent_grads) {
                        if !p.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        for g in out.grads.values() {
            g.ensure_finite("backward")?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[2.0]));
        let y = tape.param(t(&[1], &[3.0]));
        let z = tape.param(t(&[1], &[7.0]));
        let loss = tape.mul(&x, &y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).data(), &[3.0]);
        assert_eq!(g.get(&y).data(), &[2.0]);
        assert_eq!(g.get(&z).data(), &[0.0]);
        assert!(!g.has(&z));
    }

    #[test]
    fn reuse_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.add(&sq, &x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).data(), &[7.0]);
    }

    #[test]
    fn errors() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss { len: 2 })));
        let s = tape.sum(&x).unwrap();
        assert!(matches!(other.backward(&s), Err(Error::LossNotOnTape)));
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let tape = Tape::new();
        let x = tape.param(t(&[1, 2], &[1.0, -2.0]));
        let a = tape.silu(&x).unwrap();
        let b = tape.scale(&a, 3.0).unwrap();
        let c = tape.mul(&b, &x).unwrap();
        let loss = tape.sum(&c).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.visit_order(), &[loss.id(), c.id(), b.id(), a.id()]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let tape = Tape::no_grad();
        let x = tape.param(t(&[1], &[2.0]));
        let y = tape.mul(&x, &x).unwrap();
        assert!(!y.requires_grad());
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).data(), &[0.0]);
    }

    #[test]
    fn matmul_books_flops() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::<f64>::zeros(&[3, 4]));
        let b = tape.constant(Tensor::<f64>::zeros(&[4, 5]));
        {
            let _g = tape.category(FlopCategory::Attention);
            tape.matmul(&a, &b).unwrap();
        }
        tape.matmul_t(&b, true, &a, true).unwrap();
        assert_eq!(tape.flops().get(FlopCategory::Attention), 60);
        assert_eq!(tape.flops().get(FlopCategory::Projection), 60);
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        assert!(matches!(tape.powf(&x, -1.0), Err(Error::NonFinite { .. })));
    }

    type Build = dyn Fn(&Tape, &[Var<f64>]) -> Var<f64>;

    /// Central finite differences against the tape for every input entry.
    fn check(inputs: &[Tensor<f64>], f: &Build) {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(&loss).unwrap();
        let h = 1e-5;
        let eval = |xs: &[Tensor<f64>]| {
            let tp = Tape::no_grad();
            let vs: Vec<_> = xs.iter().map(|x| tp.constant(x.clone())).collect();
            f(&tp, &vs).item()
        };
        for (vi, x) in inputs.iter().enumerate() {
            let g = grads.get(&vars[vi]);
            for k in 0..x.len() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel <= 1e-6, "input {vi}[{k}]: analytic {an} vs fd {fd}");
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gradcheck_matmul_variants() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rnd(if ta { &[4, 3] } else { &[3, 4] }, 1);
            let b = rnd(if tb { &[2, 4] } else { &[4, 2] }, 2);
            let w = rnd(&[3, 2], 3);
            check(&[a, b, w], &move |tp, v| {
                let m = tp.matmul_t(&v[0], ta, &v[1], tb).unwrap();
                let m = tp.mul(&m, &v[2]).unwrap();
                tp.sum(&m).unwrap()
            });
        }
    }

    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        let a = rnd(&[3, 4], 4);
        let b = rnd(&[3, 4], 5);
        let v = rnd(&[4], 6);
        let c = rnd(&[3, 1], 7);
        let s = rnd(&[1], 8);
        check(&[a, b, v, c, s], &|tp, x| {
            let y = tp.sub(&tp.silu(&x[0]).unwrap(), &x[1]).unwrap();
            let y = tp.mul_row(&tp.add_row(&y, &x[2]).unwrap(), &x[2]).unwrap();
            let y = tp.mul_col(&y, &x[3]).unwrap();
            let y = tp.mul_scalar(&y, &x[4]).unwrap();
            let y = tp.mul(&y, &tp.silu_prime(&x[1]).unwrap()).unwrap();
            let sq = tp.sum_cols(&tp.mul(&y, &y).unwrap()).unwrap();
            let r = tp.powf(&tp.add_const(&sq, 1.0).unwrap(), -0.5).unwrap();
            tp.sum(&tp.scale(&r, 2.0).unwrap()).unwrap()
        });
    }

    #[test]
    fn gradcheck_softmax_ce_and_indexing() {
        let a = rnd(&[4, 4], 9);
        let table = rnd(&[5, 4], 10);
        let w = rnd(&[4, 4], 11);
        check(&[a, table, w], &|tp, x| {
            let p = tp.softmax_rows(&x[0], &Mask::causal(4)).unwrap();
            let e = tp.gather_rows(&x[1], &[1, 3, 1, 0]).unwrap();
            let y = tp.matmul(&p, &e).unwrap();
            let top = tp.slice_rows(&y, 0, 2).unwrap();
            let bot = tp.slice_rows(&y, 2, 2).unwrap();
            let y = tp.concat_rows(&[bot, top]).unwrap();
            let l = tp.slice_cols(&y, 0, 1).unwrap();
            let r = tp.slice_cols(&y, 1, 3).unwrap();
            let y = tp.concat_cols(&[r, l]).unwrap();
            let y = tp.scatter_rows(&y, &tp.slice_rows(&x[2], 0, 2).unwrap(), &[3, 0]).unwrap();
            let table = Rc::new(RopeTable::new(&[0, 1, 2, 5], 2, 2, 10.0));
            let y = tp.rope(&y, table).unwrap();
            let y = tp.matmul(&y, &x[2]).unwrap();
            tp.cross_entropy(&y, &[0, 3, 2, 1]).unwrap()
        });
    }

    #[test]
    fn gradcheck_three_layer_composition() {
        let x = rnd(&[5, 4], 12);
        let w1 = rnd(&[4, 6], 13);
        let w2 = rnd(&[6, 6], 14);
        let w3 = rnd(&[6, 3], 15);
        check(&[x, w1, w2, w3], &|tp, v| {
            let h = tp.silu(&tp.matmul(&v[0], &v[1]).unwrap()).unwrap();
            let h = tp.silu(&tp.matmul(&h, &v[2]).unwrap()).unwrap();
            let y = tp.matmul(&h, &v[3]).unwrap();
            tp.sum(&tp.mul(&y, &y).unwrap()).unwrap()
        });
    }

    #[test]
    fn rope_is_orthogonal() {
        let x = rnd(&[3, 8], 16);
        let table = RopeTable::new(&[0, 4, 9], 2, 4, 10_000.0);
        let y = table.apply(&x, false);
        assert!(table.apply(&y, true).max_abs_diff(&x) < 1e-12);
        for i in 0..3 {
            let n0: f64 = x.row(i).iter().map(|v| v * v).sum();
            let n1: f64 = y.row(i).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }
}
