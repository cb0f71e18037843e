//! Plain (non-recording) numeric kernels shared by the graph and the pure APIs.

use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Stabilizer added to the variance inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// `(x - mean) / sqrt(var + eps) * gamma + beta` with population variance.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::shape(format!(
            "layer_norm lengths differ: x={}, gamma={}, beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::shape("layer_norm of an empty vector"));
    }
    if !(eps > T::zero()) {
        return Err(Error::domain("layer_norm requires eps > 0"));
    }
    let mut out = vec![T::zero(); x.len()];
    normalize_into(x, eps, &mut out);
    for ((o, &g), &b) in out.iter_mut().zip(gamma).zip(beta) {
        *o = *o * g + b;
    }
    Ok(out)
}

/// Writes the standardized `x` into `out` and returns `(mean, 1/std)`.
pub(crate) fn normalize_into<T: Scalar>(x: &[T], eps: T, out: &mut [T]) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    (mean, inv)
}

pub fn softmax<T: Scalar>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax<T: Scalar>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return Err(Error::domain("log_softmax of an empty vector"));
    }
    let mut out = z.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(z: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(z: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in z.iter_mut() {
        *v = *v - lse;
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity with both norms floored at `1e-12`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let floor = T::of(1e-12);
    dot(a, b) / (l2_norm(a).max(floor) * l2_norm(b).max(floor))
}

/// `c = a · b` for row-major `a: n×k`, `b: k×m`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c = a · bᵀ` for row-major `a: n×k`, `b: m×k`.
pub(crate) fn matmul_bt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}
