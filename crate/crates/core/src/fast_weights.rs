//! Fast-weight memory: a bias-free SwiGLU network `W2[SiLU(W1 x) ⊙ (W3 x)]`
//! whose weights are rewritten chunk by chunk while a stream is processed.
//!
//! All arithmetic lives in the `*_var` functions, which record on a
//! [`Tape`] so that a whole sequence of inner updates can be differentiated
//! with respect to the slow parameters that produced its keys, values and
//! initial weights. The inner gradient is written out explicitly in tape
//! primitives rather than obtained by a nested backward pass; that keeps
//! second-order terms on the outer tape. The plain-tensor functions run the
//! same code on a non-recording tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flops::FlopCategory;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed quintic `p(σ) = aσ + bσ³ + cσ⁵` iterated by [`newton_schulz`].
///
/// `p(1) = 1`, `|p(σ) − 1| ≤ |σ − 1|` on `[0, 1.1699]` and `p` maps
/// `[0, 1]` into that interval, so every singular value of a
/// Frobenius-normalized input moves monotonically toward 1.
pub const NS_COEFFS: [f64; 3] = [3.0008, -3.4623, 1.4615];

/// Momentum buffers with a smaller Frobenius norm skip orthogonalization.
pub const NS_SKIP_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    NegDot,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::NegDot => "neg_dot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossKind::Mse),
            "neg_dot" => Some(LossKind::NegDot),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Vanilla,
    Muon,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Vanilla => "vanilla",
            UpdateRule::Muon => "muon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(UpdateRule::Vanilla),
            "muon" => Some(UpdateRule::Muon),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub lr_fast: f64,
    pub momentum_beta: f64,
    pub ns_iterations: usize,
    pub loss_kind: LossKind,
    pub update_rule: UpdateRule,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            lr_fast: 0.1,
            momentum_beta: 0.9,
            ns_iterations: 5,
            loss_kind: LossKind::Mse,
            update_rule: UpdateRule::Muon,
        }
    }
}

impl UpdateConfig {
    pub fn vanilla(lr_fast: f64) -> Self {
        Self { lr_fast, update_rule: UpdateRule::Vanilla, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_fast > 0.0 && self.lr_fast.is_finite()) {
            return Err(Error::Config(format!("lr_fast must be positive, got {}", self.lr_fast)));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::Config(format!("momentum_beta must be in [0, 1), got {}", self.momentum_beta)));
        }
        if self.ns_iterations == 0 {
            return Err(Error::Config("ns_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// The memory's complete state: weights, momentum buffers and the row norms
/// the weights are renormalized to after each Muon step.
#[derive(Clone, Debug, PartialEq)]
pub struct FastWeights<F> {
    /// `W1: d_h×d`, `W2: d×d_h`, `W3: d_h×d`.
    pub weights: [Tensor<F>; 3],
    pub momentum: [Tensor<F>; 3],
    pub row_magnitudes: [Vec<F>; 3],
}

impl<F: Scalar> FastWeights<F> {
    /// Captures the row norms of the given weights; momentum starts at zero.
    pub fn new(w1: Tensor<F>, w2: Tensor<F>, w3: Tensor<F>) -> Result<Self> {
        let (dh, d) = (w1.rows(), w1.cols());
        if w1.rank() != 2 || w2.shape() != [d, dh] || w3.shape() != [dh, d] {
            return Err(Error::shape(
                "fast_weights",
                format!("W1 {:?}, W2 {:?}, W3 {:?}", w1.shape(), w2.shape(), w3.shape()),
            ));
        }
        let weights = [w1, w2, w3];
        for w in &weights {
            w.ensure_finite("fast_weights")?;
            if let Some(row) = w.row_norms().iter().position(|&n| n <= F::zero()) {
                return Err(Error::ZeroNormRow { row });
            }
        }
        let momentum = weights.clone().map(|w| Tensor::zeros(w.shape()));
        let row_magnitudes = [weights[0].row_norms(), weights[1].row_norms(), weights[2].row_norms()];
        Ok(Self { weights, momentum, row_magnitudes })
    }

    /// Gaussian initialization with fan-in scaling.
    pub fn random<R: Rng + ?Sized>(d: usize, d_h: usize, rng: &mut R) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        let sh = 1.0 / (d_h as f64).sqrt();
        let w1 = Tensor::randn(&[d_h, d], sd, rng);
        let w2 = Tensor::randn(&[d, d_h], sh, rng);
        let w3 = Tensor::randn(&[d_h, d], sd, rng);
        Self::new(w1, w2, w3).expect("gaussian rows are nonzero")
    }

    pub fn model_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn w1(&self) -> &Tensor<F> {
        &self.weights[0]
    }

    pub fn w2(&self) -> &Tensor<F> {
        &self.weights[1]
    }

    pub fn w3(&self) -> &Tensor<F> {
        &self.weights[2]
    }

    /// Number of scalars held (weights, momentum, magnitudes).
    pub fn storage_len(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>() * 2
            + self.row_magnitudes.iter().map(Vec::len).sum::<usize>()
    }

    /// Largest `|‖row‖ − magnitude|` over all three weights.
    pub fn max_magnitude_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (w, mags) in self.weights.iter().zip(&self.row_magnitudes) {
            for (n, m) in w.row_norms().iter().zip(mags) {
                worst = worst.max((n.to_f64_lossy() - m.to_f64_lossy()).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.momentum).all(Tensor::is_finite)
    }

    pub fn cast<G: Scalar>(&self) -> FastWeights<G> {
        FastWeights {
            weights: self.weights.clone().map(|w| w.cast()),
            momentum: self.momentum.clone().map(|w| w.cast()),
            row_magnitudes: self
                .row_magnitudes
                .clone()
                .map(|m| m.into_iter().map(|x| G::of(x.to_f64_lossy())).collect()),
        }
    }
}

/// Fast weights living on a tape.
#[derive(Clone)]
pub struct FwVars<F> {
    pub weights: [Var<F>; 3],
    pub momentum: [Var<F>; 3],
    /// Row norms as `rows × 1` columns.
    pub magnitudes: [Var<F>; 3],
}

impl<F: Scalar> FwVars<F> {
    /// Fresh stream state from (possibly trainable) initial weights. The
    /// magnitudes are the initial row norms, recorded on the tape.
    pub fn start(tape: &Tape, init: &[Var<F>; 3]) -> Result<Self> {
        let mut magnitudes = Vec::with_capacity(3);
        for w in init {
            let sq = tape.sum_cols(&tape.mul(w, w)?)?;
            if let Some(row) = sq.value().data().iter().position(|&x| x <= F::zero()) {
                return Err(Error::ZeroNormRow { row });
            }
            magnitudes.push(tape.powf(&sq, F::of(0.5))?);
        }
        let momentum = [0, 1, 2].map(|i| tape.constant(Tensor::zeros(init[i].shape())));
        Ok(Self {
            weights: init.clone(),
            momentum,
            magnitudes: magnitudes.try_into().map_err(|_| Error::shape("fw_start", "magnitudes"))?,
        })
    }

    /// Non-differentiable copy of an existing state.
    pub fn from_state(tape: &Tape, fw: &FastWeights<F>) -> Self {
        let magnitudes = [0, 1, 2].map(|i| {
            let m = &fw.row_magnitudes[i];
            tape.constant(Tensor::new(&[m.len(), 1], m.clone()).expect("column"))
        });
        Self {
            weights: [0, 1, 2].map(|i| tape.constant(fw.weights[i].clone())),
            momentum: [0, 1, 2].map(|i| tape.constant(fw.momentum[i].clone())),
            magnitudes,
        }
    }

    pub fn to_state(&self) -> FastWeights<F> {
        FastWeights {
            weights: [0, 1, 2].map(|i| self.weights[i].value().clone()),
            momentum: [0, 1, 2].map(|i| self.momentum[i].value().clone()),
            row_magnitudes: [0, 1, 2].map(|i| self.magnitudes[i].value().data().to_vec()),
        }
    }
}

struct Forward<F> {
    a1: Var<F>,
    a3: Var<F>,
    s: Var<F>,
    h: Var<F>,
    y: Var<F>,
}

fn check_input<F: Scalar>(w: &[Var<F>; 3], x: &Var<F>) -> Result<()> {
    let (dh, d) = (w[0].rows(), w[0].cols());
    if x.cols() != d || w[1].shape() != [d, dh] || w[2].shape() != [dh, d] {
        return Err(Error::shape("fw_apply", format!("input {:?} for W1 {:?}", x.shape(), w[0].shape())));
    }
    Ok(())
}

fn forward<F: Scalar>(tape: &Tape, w: &[Var<F>; 3], x: &Var<F>) -> Result<Forward<F>> {
    check_input(w, x)?;
    let a1 = tape.matmul_t(x, false, &w[0], true)?;
    let a3 = tape.matmul_t(x, false, &w[2], true)?;
    let s = tape.silu(&a1)?;
    let h = tape.mul(&s, &a3)?;
    let y = tape.matmul_t(&h, false, &w[1], true)?;
    Ok(Forward { a1, a3, s, h, y })
}

/// `f_W(X)` row-wise, booked under `ttt_apply`.
pub fn fw_apply_var<F: Scalar>(tape: &Tape, w: &[Var<F>; 3], x: &Var<F>) -> Result<Var<F>> {
    let _cat = tape.category(FlopCategory::TttApply);
    Ok(forward(tape, w, x)?.y)
}

fn check_pairs<F: Scalar>(k: &Var<F>, v: &Var<F>) -> Result<()> {
    if k.shape() != v.shape() || k.rows() == 0 {
        return Err(Error::shape("fw_loss", format!("keys {:?} vs values {:?}", k.shape(), v.shape())));
    }
    Ok(())
}

fn loss_from_output<F: Scalar>(tape: &Tape, y: &Var<F>, v: &Var<F>, kind: LossKind) -> Result<Var<F>> {
    let inv_b = F::one() / F::of_usize(y.rows());
    match kind {
        LossKind::Mse => {
            let e = tape.sub(y, v)?;
            tape.scale(&tape.sum(&tape.mul(&e, &e)?)?, inv_b)
        }
        LossKind::NegDot => tape.scale(&tape.sum(&tape.mul(y, v)?)?, -inv_b),
    }
}

pub fn fw_loss_var<F: Scalar>(tape: &Tape, w: &[Var<F>; 3], k: &Var<F>, v: &Var<F>, kind: LossKind) -> Result<Var<F>> {
    check_pairs(k, v)?;
    let _cat = tape.category(FlopCategory::TttUpdate);
    let fwd = forward(tape, w, k)?;
    loss_from_output(tape, &fwd.y, v, kind)
}

/// `∇_{W1}, ∇_{W2}, ∇_{W3}` of the inner loss over all rows of `(K, V)`.
pub fn fw_grad_var<F: Scalar>(
    tape: &Tape,
    w: &[Var<F>; 3],
    k: &Var<F>,
    v: &Var<F>,
    kind: LossKind,
) -> Result<[Var<F>; 3]> {
    check_pairs(k, v)?;
    let _cat = tape.category(FlopCategory::TttUpdate);
    let Forward { a1, a3, s, h, y } = forward(tape, w, k)?;
    let inv_b = F::one() / F::of_usize(k.rows());
    let dy = match kind {
        LossKind::Mse => tape.scale(&tape.sub(&y, v)?, F::of(2.0) * inv_b)?,
        LossKind::NegDot => tape.scale(v, -inv_b)?,
    };
    let dw2 = tape.matmul_t(&dy, true, &h, false)?;
    let dh = tape.matmul(&dy, &w[1])?;
    let da3 = tape.mul(&dh, &s)?;
    let ds = tape.mul(&dh, &a3)?;
    let da1 = tape.mul(&ds, &tape.silu_prime(&a1)?)?;
    let dw1 = tape.matmul_t(&da1, true, k, false)?;
    let dw3 = tape.matmul_t(&da3, true, k, false)?;
    Ok([dw1, dw2, dw3])
}

/// Frobenius pre-scaling followed by `iterations` quintic steps. The Gram
/// matrix is formed on the smaller side; `X(XᵀX)ᵏ = (XXᵀ)ᵏX`.
pub fn newton_schulz_var<F: Scalar>(tape: &Tape, m: &Var<F>, iterations: usize) -> Result<Var<F>> {
    Ok(newton_schulz_iterates_var(tape, m, iterations)?.pop().expect("at least the normalized input"))
}

fn newton_schulz_iterates_var<F: Scalar>(tape: &Tape, m: &Var<F>, iterations: usize) -> Result<Vec<Var<F>>> {
    if m.value().data().iter().all(|x| x.is_zero()) {
        return Err(Error::ZeroMatrix);
    }
    let [a, b, c] = NS_COEFFS.map(F::of);
    let inv_norm = tape.powf(&tape.sum(&tape.mul(m, m)?)?, F::of(-0.5))?;
    let mut x = tape.mul_scalar(m, &inv_norm)?;
    let tall = m.rows() >= m.cols();
    let mut out = vec![x.clone()];
    for _ in 0..iterations {
        let gram = if tall { tape.matmul_t(&x, true, &x, false)? } else { tape.matmul_t(&x, false, &x, true)? };
        let gram2 = tape.matmul(&gram, &gram)?;
        let poly = tape.add(&tape.scale(&gram, b)?, &tape.scale(&gram2, c)?)?;
        let rotated = if tall { tape.matmul(&x, &poly)? } else { tape.matmul(&poly, &x)? };
        x = tape.add(&tape.scale(&x, a)?, &rotated)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Rescales each row of `w` to the matching entry of the column `mags`.
pub fn l2_normalize_rows_var<F: Scalar>(tape: &Tape, w: &Var<F>, mags: &Var<F>) -> Result<Var<F>> {
    if mags.value().len() != w.rows() {
        return Err(Error::shape("l2_normalize_rows", format!("{} magnitudes for {} rows", mags.value().len(), w.rows())));
    }
    if let Some(row) = mags.value().data().iter().position(|&m| m <= F::zero()) {
        return Err(Error::NonPositiveMagnitude { row });
    }
    let sq = tape.sum_cols(&tape.mul(w, w)?)?;
    if let Some(row) = sq.value().data().iter().position(|&x| x.is_zero()) {
        return Err(Error::ZeroNormRow { row });
    }
    let factor = tape.mul(&tape.powf(&sq, F::of(-0.5))?, mags)?;
    tape.mul_col(w, &factor)
}

/// One Muon chunk step: momentum, orthogonalized direction, descent and
/// renormalization of every weight.
pub fn muon_step_var<F: Scalar>(tape: &Tape, fw: &FwVars<F>, k: &Var<F>, v: &Var<F>, cfg: &UpdateConfig) -> Result<FwVars<F>> {
    cfg.validate()?;
    check_input(&fw.weights, k)?;
    let grads = fw_grad_var(tape, &fw.weights, k, v, cfg.loss_kind)?;
    let _cat = tape.category(FlopCategory::TttUpdate);
    let beta = F::of(cfg.momentum_beta);
    let mut weights = Vec::with_capacity(3);
    let mut momentum = Vec::with_capacity(3);
    for i in 0..3 {
        let g = tape.add(&tape.scale(&fw.momentum[i], beta)?, &tape.scale(&grads[i], F::one() - beta)?)?;
        let stepped = if g.value().frobenius_norm().to_f64_lossy() < NS_SKIP_NORM {
            fw.weights[i].clone()
        } else {
            let d = newton_schulz_var(tape, &g, cfg.ns_iterations)?;
            tape.sub(&fw.weights[i], &tape.scale(&d, F::of(cfg.lr_fast))?)?
        };
        weights.push(l2_normalize_rows_var(tape, &stepped, &fw.magnitudes[i])?);
        momentum.push(g);
    }
    Ok(FwVars {
        weights: weights.try_into().map_err(|_| Error::shape("muon", "weights"))?,
        momentum: momentum.try_into().map_err(|_| Error::shape("muon", "momentum"))?,
        magnitudes: fw.magnitudes.clone(),
    })
}

/// Plain gradient step `W ← W − η∇W`; momentum and magnitudes untouched.
pub fn vanilla_step_var<F: Scalar>(tape: &Tape, fw: &FwVars<F>, k: &Var<F>, v: &Var<F>, cfg: &UpdateConfig) -> Result<FwVars<F>> {
    cfg.validate()?;
    check_input(&fw.weights, k)?;
    let grads = fw_grad_var(tape, &fw.weights, k, v, cfg.loss_kind)?;
    let mut weights = Vec::with_capacity(3);
    for i in 0..3 {
        weights.push(tape.sub(&fw.weights[i], &tape.scale(&grads[i], F::of(cfg.lr_fast))?)?);
    }
    Ok(FwVars {
        weights: weights.try_into().map_err(|_| Error::shape("vanilla", "weights"))?,
        momentum: fw.momentum.clone(),
        magnitudes: fw.magnitudes.clone(),
    })
}

/// Dispatches on `cfg.update_rule`.
pub fn update_var<F: Scalar>(tape: &Tape, fw: &FwVars<F>, k: &Var<F>, v: &Var<F>, cfg: &UpdateConfig) -> Result<FwVars<F>> {
    match cfg.update_rule {
        UpdateRule::Muon => muon_step_var(tape, fw, k, v, cfg),
        UpdateRule::Vanilla => vanilla_step_var(tape, fw, k, v, cfg),
    }
}

fn vars<F: Scalar>(tape: &Tape, w: &[Tensor<F>; 3]) -> [Var<F>; 3] {
    [0, 1, 2].map(|i| tape.constant(w[i].clone()))
}

pub fn fw_apply<F: Scalar>(fw: &FastWeights<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    let tape = Tape::no_grad();
    Ok(fw_apply_var(&tape, &vars(&tape, &fw.weights), &tape.constant(x.as_matrix()))?.value().clone())
}

pub fn fw_loss<F: Scalar>(fw: &FastWeights<F>, k: &Tensor<F>, v: &Tensor<F>, kind: LossKind) -> Result<F> {
    let tape = Tape::no_grad();
    let w = vars(&tape, &fw.weights);
    Ok(fw_loss_var(&tape, &w, &tape.constant(k.as_matrix()), &tape.constant(v.as_matrix()), kind)?.item())
}

pub fn fw_grad<F: Scalar>(fw: &FastWeights<F>, k: &Tensor<F>, v: &Tensor<F>, kind: LossKind) -> Result<[Tensor<F>; 3]> {
    let tape = Tape::no_grad();
    let w = vars(&tape, &fw.weights);
    let g = fw_grad_var(&tape, &w, &tape.constant(k.as_matrix()), &tape.constant(v.as_matrix()), kind)?;
    Ok(g.map(|x| x.value().clone()))
}

pub fn fw_update_vanilla<F: Scalar>(fw: &FastWeights<F>, k: &Tensor<F>, v: &Tensor<F>, cfg: &UpdateConfig) -> Result<FastWeights<F>> {
    if cfg.update_rule != UpdateRule::Vanilla {
        return Err(Error::Config("fw_update_vanilla needs update_rule = vanilla".into()));
    }
    let tape = Tape::no_grad();
    let state = FwVars::from_state(&tape, fw);
    let k = tape.constant(k.as_matrix());
    let v = tape.constant(v.as_matrix());
    Ok(vanilla_step_var(&tape, &state, &k, &v, cfg)?.to_state())
}

pub fn fw_update_muon<F: Scalar>(fw: &FastWeights<F>, k: &Tensor<F>, v: &Tensor<F>, cfg: &UpdateConfig) -> Result<FastWeights<F>> {
    if cfg.update_rule != UpdateRule::Muon {
        return Err(Error::Config("fw_update_muon needs update_rule = muon".into()));
    }
    let tape = Tape::no_grad();
    let state = FwVars::from_state(&tape, fw);
    let k = tape.constant(k.as_matrix());
    let v = tape.constant(v.as_matrix());
    Ok(muon_step_var(&tape, &state, &k, &v, cfg)?.to_state())
}

pub fn newton_schulz<F: Scalar>(m: &Tensor<F>, iterations: usize) -> Result<Tensor<F>> {
    Ok(newton_schulz_iterates(m, iterations)?.pop().expect("nonempty"))
}

/// The normalized input followed by every iterate.
pub fn newton_schulz_iterates<F: Scalar>(m: &Tensor<F>, iterations: usize) -> Result<Vec<Tensor<F>>> {
    if iterations == 0 {
        return Err(Error::Config("ns_iterations must be at least 1".into()));
    }
    let tape = Tape::no_grad();
    let xs = newton_schulz_iterates_var(&tape, &tape.constant(m.as_matrix()), iterations)?;
    Ok(xs.into_iter().map(|x| x.value().clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::singular_values;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sigma(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn silu(x: f64) -> f64 {
        x * sigma(x)
    }

    fn silu_prime(x: f64) -> f64 {
        let s = sigma(x);
        s * (1.0 + x * (1.0 - s))
    }

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_w2_gives_zero_output() {
        let mut fw = FastWeights::<f64>::random(3, 6, &mut rng(1));
        fw.weights[1] = Tensor::zeros(&[3, 6]);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng(2));
        assert!(fw_apply(&fw, &x).unwrap().data().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn identity_weights_hand_value() {
        let eye = Tensor::<f64>::eye(2);
        let fw = FastWeights::new(eye.clone(), eye.clone(), eye).unwrap();
        let y = fw_apply(&fw, &t(&[&[1.0, 0.0]])).unwrap();
        assert!((y.at(0, 0) - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(y.at(0, 1), 0.0);
    }

    fn oracle_apply(fw: &FastWeights<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (dh, d) = (fw.hidden_dim(), fw.model_dim());
        let mut out = Tensor::zeros(&[x.rows(), d]);
        for r in 0..x.rows() {
            let mut h = vec![0.0; dh];
            for j in 0..dh {
                let (mut a1, mut a3) = (0.0, 0.0);
                for i in 0..d {
                    a1 += fw.w1().at(j, i) * x.at(r, i);
                    a3 += fw.w3().at(j, i) * x.at(r, i);
                }
                h[j] = silu(a1) * a3;
            }
            for i in 0..d {
                out.set(r, i, (0..dh).map(|j| fw.w2().at(i, j) * h[j]).sum());
            }
        }
        out
    }

    #[test]
    fn apply_matches_decomposed_oracle() {
        let fw = FastWeights::<f64>::random(4, 8, &mut rng(3));
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng(4));
        assert!(fw_apply(&fw, &x).unwrap().max_abs_diff(&oracle_apply(&fw, &x)) <= 1e-12);
        assert!(fw_apply(&fw, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn apply_books_ttt_apply_flops() {
        let fw = FastWeights::<f64>::random(4, 8, &mut rng(5));
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng(6)));
        fw_apply_var(&tape, &vars(&tape, &fw.weights), &x).unwrap();
        assert_eq!(tape.flops().get(FlopCategory::TttApply), 3 * 3 * 4 * 8);
        assert_eq!(tape.flops().total(), 3 * 3 * 4 * 8);
    }

    #[test]
    fn loss_trivial_cases_and_hand_trace() {
        let fw = FastWeights::<f64>::random(3, 6, &mut rng(7));
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng(8));
        let v = fw_apply(&fw, &k).unwrap();
        assert!(fw_loss(&fw, &k, &v, LossKind::Mse).unwrap().abs() < 1e-30);
        assert_eq!(fw_loss(&fw, &k, &Tensor::zeros(&[4, 3]), LossKind::NegDot).unwrap(), 0.0);
        assert!(fw_loss(&fw, &k, &Tensor::zeros(&[4, 2]), LossKind::Mse).is_err());

        // d = 2, d_h = 2, one pair
        let w1 = t(&[&[0.5, -1.0], &[0.25, 2.0]]);
        let w2 = t(&[&[1.0, 0.5], &[-0.75, 1.5]]);
        let w3 = t(&[&[2.0, 0.0], &[-1.0, 1.0]]);
        let fw = FastWeights::new(w1, w2, w3).unwrap();
        let (k0, k1, v0, v1) = (0.3, -0.7, 0.2, -0.4);
        let h0 = silu(0.5 * k0 - 1.0 * k1) * (2.0 * k0);
        let h1 = silu(0.25 * k0 + 2.0 * k1) * (-k0 + k1);
        let y0 = h0 + 0.5 * h1;
        let y1 = -0.75 * h0 + 1.5 * h1;
        let mse = (y0 - v0).powi(2) + (y1 - v1).powi(2);
        let neg = -(y0 * v0 + y1 * v1);
        let k = t(&[&[k0, k1]]);
        let v = t(&[&[v0, v1]]);
        assert!((fw_loss(&fw, &k, &v, LossKind::Mse).unwrap() - mse).abs() <= 1e-12);
        assert!((fw_loss(&fw, &k, &v, LossKind::NegDot).unwrap() - neg).abs() <= 1e-12);
    }

    #[test]
    fn vanilla_zero_lr_and_descent() {
        let fw = FastWeights::<f64>::random(4, 8, &mut rng(9));
        let k = Tensor::randn(&[5, 4], 1.0, &mut rng(10));
        let v = Tensor::randn(&[5, 4], 1.0, &mut rng(11));
        let mut cfg = UpdateConfig::vanilla(1e-3);
        let before = fw_loss(&fw, &k, &v, LossKind::Mse).unwrap();
        let after = fw_loss(&fw_update_vanilla(&fw, &k, &v, &cfg).unwrap(), &k, &v, LossKind::Mse).unwrap();
        assert!(after < before);
        // A validated config rejects η = 0; the step itself is checked below.
        cfg.lr_fast = 0.0;
        assert!(fw_update_vanilla(&fw, &k, &v, &cfg).is_err());
        let tape = Tape::no_grad();
        let st = FwVars::from_state(&tape, &fw);
        let zero = {
            let g = fw_grad_var(&tape, &st.weights, &tape.constant(k.clone()), &tape.constant(v.clone()), LossKind::Mse).unwrap();
            [0, 1, 2].map(|i| tape.sub(&st.weights[i], &tape.scale(&g[i], 0.0).unwrap()).unwrap().value().clone())
        };
        assert_eq!(zero, fw.weights);
    }

    #[test]
    fn vanilla_scalar_closed_form() {
        let (w1, w2, w3, k, v, eta) = (0.7, -1.2, 0.4, 1.5, 0.3, 1e-2);
        let fw = FastWeights::new(t(&[&[w1]]), t(&[&[w2]]), t(&[&[w3]])).unwrap();
        let a = w1 * k;
        let f = w2 * silu(a) * w3 * k;
        let e = 2.0 * (f - v);
        let g1 = e * w2 * w3 * k * silu_prime(a) * k;
        let g2 = e * silu(a) * w3 * k;
        let g3 = e * w2 * silu(a) * k;
        let out = fw_update_vanilla(&fw, &t(&[&[k]]), &t(&[&[v]]), &UpdateConfig::vanilla(eta)).unwrap();
        assert!((out.w1().at(0, 0) - (w1 - eta * g1)).abs() <= 1e-10);
        assert!((out.w2().at(0, 0) - (w2 - eta * g2)).abs() <= 1e-10);
        assert!((out.w3().at(0, 0) - (w3 - eta * g3)).abs() <= 1e-10);
    }

    #[test]
    fn inner_gradient_matches_finite_differences() {
        for kind in [LossKind::Mse, LossKind::NegDot] {
            let fw = FastWeights::<f64>::random(3, 4, &mut rng(12));
            let k = Tensor::randn(&[4, 3], 1.0, &mut rng(13));
            let v = Tensor::randn(&[4, 3], 1.0, &mut rng(14));
            let g = fw_grad(&fw, &k, &v, kind).unwrap();
            let h = 1e-5;
            for m in 0..3 {
                for idx in 0..fw.weights[m].len() {
                    let mut p = fw.clone();
                    p.weights[m].data_mut()[idx] += h;
                    let lp = fw_loss(&p, &k, &v, kind).unwrap();
                    p.weights[m].data_mut()[idx] -= 2.0 * h;
                    let lm = fw_loss(&p, &k, &v, kind).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = g[m].data()[idx];
                    assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "{m}/{idx}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn memorizes_a_fixed_pair() {
        let mut fw = FastWeights::<f64>::random(8, 8, &mut rng(15));
        let k = Tensor::randn(&[1, 8], 1.0, &mut rng(16));
        let v = Tensor::randn(&[1, 8], 1.0, &mut rng(17));
        let cfg = UpdateConfig::vanilla(1e-2);
        let err = |fw: &FastWeights<f64>| fw_loss(fw, &k, &v, LossKind::Mse).unwrap().sqrt();
        let mut checkpoints = vec![err(&fw)];
        for step in 1..=60 {
            fw = fw_update_vanilla(&fw, &k, &v, &cfg).unwrap();
            if step % 10 == 0 {
                checkpoints.push(err(&fw));
            }
        }
        assert!(checkpoints.windows(2).all(|p| p[1] < p[0]), "{checkpoints:?}");
    }

    #[test]
    fn ns_half_identity_and_zero() {
        let m = Tensor::<f64>::eye(4).scale(0.5);
        let out = newton_schulz(&m, 5).unwrap();
        assert!(out.max_abs_diff(&Tensor::eye(4)) <= 2e-3, "{:?}", out.data());
        assert!(matches!(newton_schulz(&Tensor::<f64>::zeros(&[3, 3]), 5), Err(Error::ZeroMatrix)));
    }

    #[test]
    fn ns_polynomial_is_monotone_on_its_domain() {
        let [a, b, c] = NS_COEFFS;
        let p = |s: f64| a * s + b * s.powi(3) + c * s.powi(5);
        assert!((p(1.0) - 1.0).abs() < 1e-12);
        let hi = (0..=100_000).map(|i| p(i as f64 / 100_000.0)).fold(0.0, f64::max);
        assert!(hi < 1.1699);
        for i in 0..=200_000 {
            let s = hi * i as f64 / 200_000.0;
            assert!((p(s) - 1.0).abs() <= (s - 1.0).abs() + 1e-15, "σ = {s}");
            assert!(p(s) >= 0.0 && p(s) <= hi + 1e-9);
        }
    }

    #[test]
    fn ns_deviation_is_non_increasing_on_random_8x8() {
        let mut r = rng(18);
        for _ in 0..50 {
            let m = Tensor::<f64>::randn(&[8, 8], 1.0, &mut r);
            let iters = newton_schulz_iterates(&m, 5).unwrap();
            let dev: Vec<f64> = iters
                .iter()
                .map(|x| singular_values(x).iter().map(|s| (s - 1.0).powi(2)).sum::<f64>().sqrt())
                .collect();
            assert!(dev.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{dev:?}");
        }
    }

    #[test]
    fn ns_preserves_singular_vectors_of_rectangular_input() {
        let m = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng(19));
        let x = newton_schulz(&m, 5).unwrap();
        // Same right singular vectors ⇒ MᵀX is symmetric positive definite.
        let mx = m.matmul_t(true, &x, false).unwrap();
        assert!(mx.max_abs_diff(&mx.transpose()) < 1e-10);
        let wide = newton_schulz(&m.transpose(), 5).unwrap();
        assert!(wide.max_abs_diff(&x.transpose()) < 1e-12);
    }

    #[test]
    fn muon_zero_gradient_only_renormalizes() {
        let mut fw = FastWeights::<f64>::random(3, 6, &mut rng(20));
        fw.weights[0] = fw.weights[0].scale(2.0);
        // V = f(K) under mse gives a zero gradient.
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng(21));
        let mut base = fw.clone();
        base.weights[0] = fw.weights[0].scale(0.5);
        let v = fw_apply(&fw, &k).unwrap();
        let out = fw_update_muon(&fw, &k, &v, &UpdateConfig::default()).unwrap();
        assert!(out.max_magnitude_error() < 1e-12);
        assert!(out.weights[0].max_abs_diff(&base.weights[0]) < 1e-12);
        assert!(out.weights[1].max_abs_diff(&fw.weights[1]) < 1e-12);
    }

    #[test]
    fn muon_first_step_with_beta_zero_uses_ns_of_gradient() {
        let fw = FastWeights::<f64>::random(3, 6, &mut rng(22));
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng(23));
        let v = Tensor::randn(&[4, 3], 1.0, &mut rng(24));
        let cfg = UpdateConfig { momentum_beta: 0.0, ..UpdateConfig::default() };
        let out = fw_update_muon(&fw, &k, &v, &cfg).unwrap();
        let g = fw_grad(&fw, &k, &v, LossKind::Mse).unwrap();
        for i in 0..3 {
            assert_eq!(out.momentum[i], g[i]);
            let d = newton_schulz(&g[i], 5).unwrap();
            let want = crate::tensor::l2_normalize_rows(
                &fw.weights[i].zip_map(&d, |w, d| w - 0.1 * d),
                &fw.row_magnitudes[i],
            )
            .unwrap();
            assert!(out.weights[i].max_abs_diff(&want) <= 1e-14);
        }
    }

    // Hand-scripted reference: nested loops, the textbook polynomial form
    // (XXᵀ)-side only, explicit renormalization.
    type M = Vec<Vec<f64>>;

    fn mm(a: &M, b: &M) -> M {
        let (n, k, p) = (a.len(), b.len(), b[0].len());
        (0..n).map(|i| (0..p).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
    }

    fn tr(a: &M) -> M {
        (0..a[0].len()).map(|j| (0..a.len()).map(|i| a[i][j]).collect()).collect()
    }

    fn lin(a: &M, x: f64, b: &M, y: f64) -> M {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(p, q)| x * p + y * q).collect()).collect()
    }

    fn to_m(t: &Tensor<f64>) -> M {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn muon_matches_step_by_step_reference_trace() {
        let fw = FastWeights::<f64>::random(2, 2, &mut rng(25));
        let k = Tensor::randn(&[3, 2], 1.0, &mut rng(26));
        let v = Tensor::randn(&[3, 2], 1.0, &mut rng(27));
        let cfg = UpdateConfig::default();
        // Warm the momentum with one prior step so β·G is exercised.
        let fw = fw_update_muon(&fw, &v, &k, &cfg).unwrap();
        let out = fw_update_muon(&fw, &k, &v, &cfg).unwrap();

        let (w1, w2, w3) = (to_m(fw.w1()), to_m(fw.w2()), to_m(fw.w3()));
        let (km, vm) = (to_m(&k), to_m(&v));
        let b = km.len() as f64;
        let a1 = mm(&km, &tr(&w1));
        let a3 = mm(&km, &tr(&w3));
        let h: M = (0..3).map(|r| (0..2).map(|j| silu(a1[r][j]) * a3[r][j]).collect()).collect();
        let y = mm(&h, &tr(&w2));
        let dy: M = (0..3).map(|r| (0..2).map(|i| 2.0 * (y[r][i] - vm[r][i]) / b).collect()).collect();
        let g2 = mm(&tr(&dy), &h);
        let dh = mm(&dy, &w2);
        let da3: M = (0..3).map(|r| (0..2).map(|j| dh[r][j] * silu(a1[r][j])).collect()).collect();
        let da1: M = (0..3).map(|r| (0..2).map(|j| dh[r][j] * a3[r][j] * silu_prime(a1[r][j])).collect()).collect();
        let g1 = mm(&tr(&da1), &km);
        let g3 = mm(&tr(&da3), &km);
        let [a, bb, c] = NS_COEFFS;
        for (i, (w, g)) in [(w1, g1), (w2, g2), (w3, g3)].into_iter().enumerate() {
            let mom = lin(&to_m(&fw.momentum[i]), 0.9, &g, 0.1);
            let fro = mom.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            let mut x: M = mom.iter().map(|r| r.iter().map(|v| v / fro).collect()).collect();
            for _ in 0..5 {
                let s = mm(&x, &tr(&x));
                let s2 = mm(&s, &s);
                x = lin(&lin(&x, a, &mm(&s, &x), bb), 1.0, &mm(&s2, &x), c);
            }
            let stepped = lin(&w, 1.0, &x, -0.1);
            for (r, row) in stepped.iter().enumerate() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (j, val) in row.iter().enumerate() {
                    let want = val / n * fw.row_magnitudes[i][r];
                    assert!((out.weights[i].at(r, j) - want).abs() <= 1e-8);
                }
            }
            for (r, row) in mom.iter().enumerate() {
                for (j, val) in row.iter().enumerate() {
                    assert!((out.momentum[i].at(r, j) - val).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn updates_are_order_sensitive_and_norm_preserving() {
        let fw = FastWeights::<f64>::random(4, 8, &mut rng(28));
        let ka = Tensor::randn(&[4, 4], 1.0, &mut rng(29));
        let va = Tensor::randn(&[4, 4], 1.0, &mut rng(30));
        let kb = Tensor::randn(&[4, 4], 1.0, &mut rng(31));
        let vb = Tensor::randn(&[4, 4], 1.0, &mut rng(32));
        let cfg = UpdateConfig::default();
        let ab = fw_update_muon(&fw_update_muon(&fw, &ka, &va, &cfg).unwrap(), &kb, &vb, &cfg).unwrap();
        let ba = fw_update_muon(&fw_update_muon(&fw, &kb, &vb, &cfg).unwrap(), &ka, &va, &cfg).unwrap();
        assert!(ab.weights[0].max_abs_diff(&ba.weights[0]) > 1e-6);
        assert!(ab.max_magnitude_error() < 1e-12 && ba.max_magnitude_error() < 1e-12);
    }

    #[test]
    fn rule_preconditions_and_shapes() {
        let fw = FastWeights::<f64>::random(2, 4, &mut rng(33));
        let k = Tensor::randn(&[3, 2], 1.0, &mut rng(34));
        assert!(fw_update_muon(&fw, &k, &k, &UpdateConfig::vanilla(0.1)).is_err());
        assert!(fw_update_vanilla(&fw, &k, &k, &UpdateConfig::default()).is_err());
        assert!(fw_update_muon(&fw, &k, &Tensor::zeros(&[2, 2]), &UpdateConfig::default()).is_err());
        let bad = UpdateConfig { ns_iterations: 0, ..UpdateConfig::default() };
        assert!(fw_update_muon(&fw, &k, &k, &bad).is_err());
        assert!(FastWeights::new(Tensor::<f64>::eye(2), Tensor::eye(3), Tensor::eye(2)).is_err());
    }
}
