//! Pure forward kernels. The autodiff graph calls these and adds the backward rules.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::Numerical("non-finite input".into()));
    }
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row, None);
    }
    Ok(out)
}

/// Softmax over the entries with `keep[j] == true`; the rest become exactly zero.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], keep: Option<&[bool]>) {
    let allowed = |j: usize| keep.is_none_or(|k| k[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    if sum > T::zero() {
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_raw<T: Real>(x: &[T], cols: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, NormStats<T>) {
    let n = T::of(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / cols);
    for (r, row) in x.chunks(cols).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let h = (row[j] - mean) * is;
            xhat[r * cols + j] = h;
            out[r * cols + j] = h * gamma[j] + beta[j];
        }
    }
    (out, NormStats { xhat, inv_std })
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let h = x.cols();
    if gamma.len() != h || beta.len() != h {
        return Err(Error::Shape(format!(
            "layer_norm over {h} columns with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let (out, _) = layer_norm_raw(x.data(), h, gamma.data(), beta.data(), T::of(eps));
    Tensor::new(x.shape().to_vec(), out)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_C);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
