use crate::error::{contract, Error, Result};
use crate::instrument::flops;

use super::{Matrix, Real};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a · b`. Each output entry accumulates its dot product in increasing `k`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
    flops::add((m * k * n) as u64);
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(b.row(j)) {
                acc = acc + x * y;
            }
            out.set(i, j, acc);
        }
    }
    flops::add((m * k * n) as u64);
    Ok(out)
}

/// `max(v) + ln Σ exp(v_i − max(v))`.
pub fn logsumexp<T: Real>(v: &[T]) -> Result<T> {
    if v.is_empty() {
        return contract("logsumexp of an empty slice");
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = v
        .iter()
        .map(|&x| (x - max).exp())
        .fold(T::zero(), |a, b| a + b);
    Ok(max + sum.ln())
}

/// `ln(1 + eˣ)`, evaluated as `x + ln(1 + e⁻ˣ)` for positive `x`.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with max shifting.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Per-row standardisation followed by `gain ⊙ x̂ + bias`.
pub fn layer_norm<T: Real>(m: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Result<Matrix<T>> {
    let d = m.cols();
    if gain.len() != d || bias.len() != d {
        return contract(format!(
            "layer_norm gain/bias lengths {}/{} do not match {d} columns",
            gain.len(),
            bias.len()
        ));
    }
    if eps.is_nan() || eps <= T::zero() {
        return contract("layer_norm eps must be positive");
    }
    let n = T::of(d as f64);
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
            / n;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *v = g * ((*v - mean) * inv) + b;
        }
    }
    flops::add((3 * m.rows() * d) as u64);
    Ok(out)
}

/// Mean over rows of `−ln N(y; μ, σ²)`. All three are `M × 1`.
pub fn gaussian_nll(mean: &Matrix<f64>, std: &Matrix<f64>, y: &Matrix<f64>) -> Result<f64> {
    if mean.shape() != std.shape() || mean.shape() != y.shape() || mean.cols() != 1 {
        return Err(Error::Shape {
            op: "gaussian_nll",
            lhs: mean.shape(),
            rhs: y.shape(),
        });
    }
    if mean.rows() == 0 {
        return contract("gaussian_nll over zero targets");
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for ((&mu, &sigma), &t) in mean.as_slice().iter().zip(std.as_slice()).zip(y.as_slice()) {
        let z = (t - mu) / sigma;
        total += half_log_2pi + sigma.ln() + 0.5 * z * z;
    }
    Ok(total / mean.rows() as f64)
}

pub fn relu<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    m.map(|v| if v > T::zero() { v } else { T::zero() })
}
