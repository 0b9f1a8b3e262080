//! Free-standing forward primitives over plain slices.
//!
//! These are the tape-free versions used for inference (scoring, decoding).
//! The tape in [`super::tape`] calls the same scalar kernels so that recorded
//! and unrecorded forward passes agree bit-for-bit.

use super::{Matrix, NumError};

/// `y = W x + b` for a single input vector.
pub fn affine(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>, NumError> {
    if w.cols() != x.len() {
        return Err(NumError::Shape { op: "affine", left: w.shape(), right: (x.len(), 1) });
    }
    if w.rows() != b.len() {
        return Err(NumError::Shape { op: "affine bias", left: w.shape(), right: (b.len(), 1) });
    }
    Ok((0..w.rows()).map(|r| w.row(r).iter().zip(x).fold(b[r], |acc, (wi, xi)| acc + wi * xi)).collect())
}

#[inline]
pub fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without cancellation for large |x|.
#[inline]
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| relu_scalar(v)).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Max-subtracted log-softmax.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    log_softmax_into(x, &mut out);
    out
}

pub(crate) fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_zero_and_identity() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(affine(&Matrix::zeros(2, 3), &[0.0, 0.0], &x).unwrap(), vec![0.0, 0.0]);
        assert_eq!(affine(&Matrix::identity(3), &[0.0; 3], &x).unwrap(), x.to_vec());
    }

    #[test]
    fn affine_dimension_mismatch() {
        let err = affine(&Matrix::zeros(2, 3), &[0.0, 0.0], &[1.0]).unwrap_err();
        assert!(err.to_string().contains("2x3"));
        assert!(affine(&Matrix::zeros(2, 3), &[0.0], &[1.0; 3]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(4.0) - 0.982_013_790_0).abs() < 1e-10);
        assert!((sigmoid_scalar(-4.0) + sigmoid_scalar(4.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn log_sigmoid_matches_naive() {
        for &x in &[-30.0, -2.0, 0.0, 0.5, 3.0, 25.0] {
            let naive = sigmoid_scalar(x).ln();
            assert!((log_sigmoid_scalar(x) - naive).abs() < 1e-12, "x={x}");
        }
        assert!(log_sigmoid_scalar(-1000.0).is_finite());
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let p = softmax(&[2.5, 2.5, 2.5]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let q = softmax(&[1000.0, -3.0, 0.1, 7.0]);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = log_softmax(&[1000.0, -3.0, 0.1, 7.0]);
        assert!(l.iter().all(|v| v.is_finite()));
        assert!((l.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
