//! Dense row-major tensors and the raw (untracked) kernels behind every
//! tracked operation on the [`Tape`](crate::autodiff::Tape).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape("tensor", format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Like [`Tensor::new`] but also rejects NaN/Inf.
    pub fn new_finite(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::of(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| F::of(rng.random_range(lo..hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row count when viewed as a matrix (leading extents flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.data.len() / self.cols().max(1),
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Same data viewed as a `rows × cols` matrix.
    pub fn as_matrix(&self) -> Self {
        Self { shape: vec![self.rows(), self.cols()], data: self.data.clone() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.to_f64_lossy())).collect(),
        }
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, ta: bool, other: &Self, tb: bool) -> Result<Self> {
        let (ar, ac) = (self.rows(), self.cols());
        let (br, bc) = (other.rows(), other.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {m}x{k} · {k2}x{n}"),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: extents and strides come from the tensors' own shapes.
            unsafe {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    F::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Self { shape: vec![m, n], data: out })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(false, other, false)
    }

    /// Rows `start..start+len` of the matrix view.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        Self { shape: vec![len, c], data: self.data[start * c..(start + len) * c].to_vec() }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Self { shape: vec![r, len], data }
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::shape("concat_rows", format!("{} vs {c} columns", p.cols())));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: vec![rows, c], data })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let r = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { shape: vec![r, total], data })
    }

    /// Gather rows by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self { shape: vec![idx.len(), c], data })
    }

    /// Per-row L2 norms.
    pub fn row_norms(&self) -> Vec<F> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|&x| x * x).sum::<F>().sqrt())
            .collect()
    }
}

/// Boolean matrix used to exclude attention logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape("mask", format!("{rows}x{cols} needs {} bits", rows * cols)));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, bits }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![true; rows * cols] }
    }

    /// Query `i` sees key `j` iff `j <= i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn silu_scalar<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

/// d/dx silu(x) = σ(x)(1 + x(1 − σ(x))).
#[inline]
pub(crate) fn silu_prime_scalar<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// d²/dx² silu(x) = σ(x)(1 − σ(x))(2 + x(1 − 2σ(x))).
#[inline]
pub(crate) fn silu_second_scalar<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    let two = F::one() + F::one();
    s * (F::one() - s) * (two + x * (F::one() - two * s))
}

pub(crate) fn softmax_rows_raw<F: Scalar>(s: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    let (r, c) = (s.rows(), s.cols());
    if mask.rows() != r || mask.cols() != c {
        return Err(Error::shape("softmax_rows", format!("mask {}x{} vs {r}x{c}", mask.rows(), mask.cols())));
    }
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        let row = s.row(i);
        let mut max = F::neg_infinity();
        for j in 0..c {
            if mask.get(i, j) && row[j] > max {
                max = row[j];
            }
        }
        if max == F::neg_infinity() {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let mut total = F::zero();
        for j in 0..c {
            if mask.get(i, j) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total = total + e;
            }
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v = *v / total;
        }
    }
    Tensor::new(&[r, c], out)
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(silu_scalar)
}

/// Row-wise softmax ignoring masked-out entries (they receive weight 0).
pub fn softmax_rows<F: Scalar>(s: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    let out = softmax_rows_raw(s, mask)?;
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

/// Rescales every row to the matching entry of `magnitudes`, keeping its
/// direction. A zero row cannot be rescaled and is an error.
pub fn l2_normalize_rows<F: Scalar>(m: &Tensor<F>, magnitudes: &[F]) -> Result<Tensor<F>> {
    let (r, c) = (m.rows(), m.cols());
    if magnitudes.len() != r {
        return Err(Error::shape("l2_normalize_rows", format!("{} magnitudes for {r} rows", magnitudes.len())));
    }
    let mut out = m.as_matrix();
    for (i, (&mag, norm)) in magnitudes.iter().zip(m.row_norms()).enumerate() {
        if !(mag > F::zero()) {
            return Err(Error::NonPositiveMagnitude { row: i });
        }
        if norm == F::zero() {
            return Err(Error::ZeroNormRow { row: i });
        }
        let f = mag / norm;
        for v in &mut out.data[i * c..(i + 1) * c] {
            *v = *v * f;
        }
    }
    out.ensure_finite("l2_normalize_rows")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f64>::new_finite(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&b).unwrap(), b);
        let two = Tensor::<f64>::new(&[1, 1], vec![2.0]).unwrap();
        let three = Tensor::<f64>::new(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(two.matmul(&three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
        // transposed variants
        let at = a.transpose();
        let bt = b.transpose();
        assert!(at.matmul_t(true, &b, false).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
        assert!(a.matmul_t(false, &bt, true).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
        assert!(at.matmul_t(true, &bt, true).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn silu_values() {
        let t = Tensor::<f64>::new(&[3], vec![0.0, 50.0, 1.0]).unwrap();
        let s = silu(&t);
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 50.0).abs() <= 1e-9);
        assert!((s.data()[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() <= 1e-9);
        assert!((s.data()[2] - 0.7310585786).abs() <= 1e-9);
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::<f64>::new(&[1, 3], vec![5.0, -1.0, 2.0]).unwrap();
        let m = Mask::new(1, 3, vec![false, true, false]).unwrap();
        assert_eq!(softmax_rows(&s, &m).unwrap().data(), &[0.0, 1.0, 0.0]);

        let s = Tensor::<f64>::new(&[1, 2], vec![0.3, 0.3]).unwrap();
        assert_eq!(softmax_rows(&s, &Mask::all(1, 2)).unwrap().data(), &[0.5, 0.5]);

        let m = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(softmax_rows(&s, &m), Err(Error::FullyMaskedRow { row: 0 })));
    }

    #[test]
    fn softmax_causal_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::<f64>::randn(&[4, 4], 2.0, &mut rng);
        let p = softmax_rows(&s, &Mask::causal(4)).unwrap();
        for i in 0..4 {
            let z: f64 = (0..=i).map(|j| s.at(i, j).exp()).sum();
            for j in 0..4 {
                let want = if j <= i { s.at(i, j).exp() / z } else { 0.0 };
                assert!((p.at(i, j) - want).abs() <= 1e-12);
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let m = Tensor::<f64>::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let out = l2_normalize_rows(&m, &[1.0]).unwrap();
        assert!((out.at(0, 0) - 0.6).abs() < 1e-15 && (out.at(0, 1) - 0.8).abs() < 1e-15);
        assert!(l2_normalize_rows(&m, &[5.0]).unwrap().max_abs_diff(&m) <= 1e-12);
        let z = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(l2_normalize_rows(&z, &[1.0, 1.0]), Err(Error::ZeroNormRow { row: 0 })));
        assert!(l2_normalize_rows(&m, &[0.0]).is_err());
        assert!(l2_normalize_rows(&m, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn l2_normalize_random_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let mags: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..3.0)).collect();
        let out = l2_normalize_rows(&m, &mags).unwrap();
        for i in 0..8 {
            let norm = out.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - mags[i]).abs() <= 1e-10);
            // direction preserved: positive multiple
            let ratio = out.at(i, 0) / m.at(i, 0);
            assert!(ratio > 0.0);
            for j in 0..8 {
                assert!((out.at(i, j) - ratio * m.at(i, j)).abs() <= 1e-10);
            }
        }
    }
}
