//! Slice-level numeric kernels shared by the tape and the plain helpers.

use super::{Result, Scalar, TensorError};

pub(crate) fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `a` is m×k, `b` is k×n. Accumulation over k runs in index order.
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
    out
}

pub(crate) fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a` is m×k, `b` is n×k; returns a·bᵀ (m×n).
pub(crate) fn matmul_t<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `a` is k×m, `b` is k×n; returns aᵀ·b (m×n).
pub(crate) fn t_matmul<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let at = transpose(a, k, m);
    matmul(&at, b, m, k, n)
}

/// Row softmax with max subtraction. With `causal`, row i only spans
/// columns 0..=i and the rest are exactly zero.
pub(crate) fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize, causal: bool) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        let width = if causal { (i + 1).min(cols) } else { cols };
        let row = &x[i * cols..i * cols + width];
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let dst = &mut out[i * cols..i * cols + width];
        let mut sum = F::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Per-row layer norm. Returns the output and the (mean, 1/std) of each row.
pub(crate) fn layer_norm<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    rows: usize,
    cols: usize,
    eps: F,
) -> (Vec<F>, Vec<(F, F)>) {
    let n = F::from_f64(cols as f64);
    let mut out = vec![F::zero(); rows * cols];
    let mut stats = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().fold(F::zero(), |s, &v| s + v) / n;
        let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
        let rstd = F::one() / (var + eps).sqrt();
        let dst = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dst[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }

    #[test]
    fn gelu_matches_known_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0f64) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
