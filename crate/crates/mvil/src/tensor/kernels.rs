//! Dense f64 kernels shared by the tape and the finite-difference checker.
//!
//! Every kernel has a sequential implementation; the hot ones (matmul, gelu)
//! also have a rayon row/chunk-parallel variant behind the `parallel` feature.
//! The parallel variants split work so that each output element is still
//! produced by one sequential accumulation in the same order as the
//! sequential kernel, so both paths are bit-identical and runs stay
//! reproducible regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (m*k*n) below which the dispatching matmul stays sequential.
pub const MATMUL_PAR_THRESHOLD: usize = 1 << 18;

/// Element threshold below which elementwise dispatch stays sequential.
pub const ELEMENTWISE_PAR_THRESHOLD: usize = 1 << 14;

/// C[m,n] = A[m,k] * B[k,n], sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        matmul_row(&a[i * k..(i + 1) * k], b, k, n, row_out);
    }
}

/// One output row: row_out[j] = sum_p a_row[p] * b[p, j].
#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], k: usize, n: usize, row_out: &mut [f64]) {
    row_out.fill(0.0);
    for (p, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in row_out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n], parallel over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(row_out, a_row)| matmul_row(a_row, b, k, n, row_out));
}

/// Dispatching matmul: parallel for large products when the feature is on.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= MATMUL_PAR_THRESHOLD {
        matmul_par(a, b, m, k, n, out);
        return;
    }
    matmul_seq(a, b, m, k, n, out);
}

/// out[j,i] = x[i,j] for x of shape [rows, cols].
pub fn transpose(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
}

/// Exact GeLU: x * Phi(x) with the Gaussian CDF via erf.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_seq(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu_scalar(v);
    }
}

#[cfg(feature = "parallel")]
pub fn gelu_par(x: &[f64], out: &mut [f64]) {
    out.par_iter_mut()
        .zip(x.par_iter())
        .for_each(|(o, &v)| *o = gelu_scalar(v));
}

pub fn gelu(x: &[f64], out: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if x.len() >= ELEMENTWISE_PAR_THRESHOLD {
        gelu_par(x, out);
        return;
    }
    gelu_seq(x, out);
}

/// Row-wise softmax with max-subtraction for an [rows, cols] matrix.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), rows * cols);
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
}

/// Per-row standardization over the channel axis followed by affine
/// scale/shift; returns (mean, inv_std) per row for the backward pass.
pub fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(gamma.len(), cols);
    debug_assert_eq!(beta.len(), cols);
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        means[i] = mean;
        inv_stds[i] = inv_std;
        let out_row = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out_row[j] = gamma[j] * (row[j] - mean) * inv_std + beta[j];
        }
    }
    (means, inv_stds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_zero() {
        let a = vec![0.0; 6];
        let b = vec![1.5, -2.0, 0.25, 7.0, 3.0, -1.0];
        let mut out = vec![9.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn matmul_par_matches_seq_bitwise() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let (m, k, n) = (37, 23, 41);
        let mut s = 1u64;
        for _ in 0..m * k {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            a.push((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
        }
        for _ in 0..k * n {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            b.push((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
        }
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_seq(&a, &b, m, k, n, &mut seq);
        matmul_par(&a, &b, m, k, n, &mut par);
        assert_eq!(seq, par);
    }

    #[test]
    fn softmax_symmetric_row() {
        let x = vec![3.7, 3.7, 3.7];
        let mut out = vec![0.0; 3];
        softmax_rows(&x, 1, 3, &mut out);
        for &v in &out {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        // [0, ln 2] -> [1/3, 2/3], checked against direct exponentiation.
        let x = vec![0.0, std::f64::consts::LN_2];
        let mut out = vec![0.0; 2];
        softmax_rows(&x, 1, 2, &mut out);
        let e0 = (0.0f64).exp();
        let e1 = std::f64::consts::LN_2.exp();
        assert_abs_diff_eq!(out[0], e0 / (e0 + e1), epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], e1 / (e0 + e1), epsilon = 1e-15);
        assert_abs_diff_eq!(out[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = vec![0.3, -1.2, 4.0, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 17.5).collect();
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        softmax_rows(&x, 1, 4, &mut a);
        softmax_rows(&shifted, 1, 4, &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_abs_diff_eq!(gelu_scalar(10.0), 10.0, epsilon = 1e-6);
        // 1 * Phi(1) from a high-precision erf evaluation.
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.8413447460685429, epsilon = 1e-10);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = vec![5.0, 5.0, 5.0, 5.0];
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let mut out = vec![0.0; 4];
        layer_norm_rows(&x, 1, 4, &gamma, &beta, 1e-5, &mut out);
        for &v in &out {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_row() {
        // Row [1,-1]: mean 0, population variance 1, so the row is fixed.
        let x = vec![1.0, -1.0];
        let gamma = vec![1.0; 2];
        let beta = vec![0.0; 2];
        let mut out = vec![0.0; 2];
        layer_norm_rows(&x, 1, 2, &gamma, &beta, 1e-12, &mut out);
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn layer_norm_beta_only() {
        let x = vec![0.4, 2.0, -3.0, 1.0, 0.0, 9.0];
        let gamma = vec![0.0; 3];
        let beta = vec![7.0, -1.0, 0.5];
        let mut out = vec![0.0; 6];
        layer_norm_rows(&x, 2, 3, &gamma, &beta, 1e-5, &mut out);
        assert_eq!(&out[0..3], &beta[..]);
        assert_eq!(&out[3..6], &beta[..]);
    }
}
