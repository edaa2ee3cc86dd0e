//! Multi-head causal attention: sliding-window and full-prefix variants.
//!
//! Queries are processed in blocks of `w` rows; block `[s, e)` sees keys
//! `[s − w + 1, e)`, so the logits actually formed are banded rather than
//! `n × n`. Full causal attention is the single-block special case.

use std::rc::Rc;

use crate::autodiff::{RopeTable, Tape, Var};
use crate::error::{Error, Result};
use crate::flops::FlopCategory;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

/// Attention of queries at absolute positions `q_pos` over keys at `k_pos`.
/// Query `i` sees key `j` iff `k_pos[j] ≤ q_pos[i]` and, with a window,
/// `q_pos[i] − k_pos[j] < w`.
pub fn masked_attention_var<F: Scalar>(
    tape: &Tape,
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    heads: usize,
    q_pos: &[usize],
    k_pos: &[usize],
    window: Option<usize>,
) -> Result<Var<F>> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 || k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}, {heads} heads", q.shape(), k.shape(), v.shape()),
        ));
    }
    if q_pos.len() != q.rows() || k_pos.len() != k.rows() {
        return Err(Error::shape("attention", "position lists do not match rows"));
    }
    let mask = Mask::from_fn(q.rows(), k.rows(), |i, j| {
        k_pos[j] <= q_pos[i] && window.is_none_or(|w| q_pos[i] - k_pos[j] < w)
    });
    let _cat = tape.category(FlopCategory::Attention);
    let hd = d / heads;
    let inv = F::one() / F::of_usize(hd).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (tape.slice_cols(q, h * hd, hd)?, tape.slice_cols(k, h * hd, hd)?, tape.slice_cols(v, h * hd, hd)?)
        };
        let scores = tape.scale(&tape.matmul_t(&qh, false, &kh, true)?, inv)?;
        let p = tape.softmax_rows(&scores, &mask)?;
        outs.push(tape.matmul(&p, &vh)?);
    }
    tape.concat_cols(&outs)
}

/// Query blocks `(start, end, key_start)` for window `w` over `n` tokens.
pub fn window_blocks(n: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + w).min(n);
        out.push((s, e, (s + 1).saturating_sub(w)));
        s = e;
    }
    out
}

/// Sliding-window causal attention over already rotated `q`, `k`.
pub fn sliding_window_attn_var<F: Scalar>(
    tape: &Tape,
    q: &Var<F>,
    k: &Var<F>,
    v: &Var<F>,
    heads: usize,
    w: usize,
) -> Result<Var<F>> {
    if w == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let n = q.rows();
    if n == 0 || k.rows() != n {
        return Err(Error::shape("sliding_window_attn", format!("q {:?}, k {:?}", q.shape(), k.shape())));
    }
    let blocks = window_blocks(n, w);
    let mut outs = Vec::with_capacity(blocks.len());
    for (s, e, ks) in blocks {
        let whole = s == 0 && e == n;
        let (qb, kb, vb) = if whole {
            (q.clone(), k.clone(), v.clone())
        } else {
            (tape.slice_rows(q, s, e - s)?, tape.slice_rows(k, ks, e - ks)?, tape.slice_rows(v, ks, e - ks)?)
        };
        let qp: Vec<usize> = (s..e).collect();
        let kp: Vec<usize> = (ks..e).collect();
        let window = if w >= n { None } else { Some(w) };
        outs.push(masked_attention_var(tape, &qb, &kb, &vb, heads, &qp, &kp, window)?);
    }
    tape.concat_rows(&outs)
}

/// Full causal attention: the one-block case of the sliding window.
pub fn full_causal_attn_var<F: Scalar>(tape: &Tape, q: &Var<F>, k: &Var<F>, v: &Var<F>, heads: usize) -> Result<Var<F>> {
    sliding_window_attn_var(tape, q, k, v, heads, q.rows().max(1))
}

/// MACs of [`sliding_window_attn_var`] (scores plus weighted values).
pub fn sliding_window_macs(n: usize, w: usize, d: usize) -> u64 {
    window_blocks(n, w).iter().map(|&(s, e, ks)| 2 * ((e - s) * (e - ks) * d) as u64).sum()
}

fn rotate<F: Scalar>(tape: &Tape, x: &Var<F>, heads: usize, theta: f64) -> Result<Var<F>> {
    let positions: Vec<usize> = (0..x.rows()).collect();
    tape.rope(x, Rc::new(RopeTable::new(&positions, heads, x.cols() / heads, theta)))
}

/// Tensor-level sliding-window attention with rotary encoding at
/// positions `0..n`.
pub fn sliding_window_attn<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    w: usize,
    heads: usize,
    rope_theta: f64,
) -> Result<Tensor<F>> {
    let tape = Tape::no_grad();
    let (q, k, v) = (tape.constant(q.as_matrix()), tape.constant(k.as_matrix()), tape.constant(v.as_matrix()));
    let (qr, kr) = (rotate(&tape, &q, heads, rope_theta)?, rotate(&tape, &k, heads, rope_theta)?);
    Ok(sliding_window_attn_var(&tape, &qr, &kr, &v, heads, w)?.value().clone())
}

pub fn full_causal_attn<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize, rope_theta: f64) -> Result<Tensor<F>> {
    sliding_window_attn(q, k, v, q.rows().max(1), heads, rope_theta)
}
