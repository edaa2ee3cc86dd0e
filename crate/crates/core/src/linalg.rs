//! Small dense linear algebra used to inspect spectra.

use crate::tensor::Tensor;
use crate::scalar::Scalar;

/// Singular values (descending) by one-sided cyclic Jacobi, in f64.
///
/// Rotations are applied to column pairs until every pair is orthogonal
/// to `tol` relative precision; the column norms are then the singular
/// values. Intended for matrices up to a few dozen on a side.
pub fn singular_values<F: Scalar>(m: &Tensor<F>) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    // Work on the side with fewer columns.
    let (rows, cols, a0): (usize, usize, Vec<f64>) = if c <= r {
        (r, c, m.data().iter().map(|x| x.to_f64_lossy()).collect())
    } else {
        let t = m.transpose();
        (c, r, t.data().iter().map(|x| x.to_f64_lossy()).collect())
    };
    let mut a = a0;
    let tol = 1e-15;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (x, y) = (a[i * cols + p], a[i * cols + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..rows {
                    let (x, y) = (a[i * cols + p], a[i * cols + q]);
                    a[i * cols + p] = cs * x - sn * y;
                    a[i * cols + q] = sn * x + cs * y;
                }
            }
        }
        if off <= tol {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j] * a[i * cols + j]).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}
