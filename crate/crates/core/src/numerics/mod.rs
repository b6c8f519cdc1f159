//! Dense tensors, activations and the batch-normalization transform.

mod batch_norm;
mod tensor;

pub use batch_norm::{batch_norm, batch_norm_backward, BnCache, BnMode, BnState};
pub use tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use crate::error::Result;

/// Largest `f64` strictly below 1; keeps saturated gates inside the open unit interval.
const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_CEIL)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] expressed through its output `s`.
pub fn sigmoid_backward(grad: &Tensor, s: &Tensor) -> Result<Tensor> {
    grad.zip_map(s, "sigmoid_backward", |g, s| g * s * (1.0 - s))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward of [`relu`] given its input `x`. The subgradient at exactly 0 is 0.
pub fn relu_backward(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    grad.zip_map(x, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })
}

/// Row-wise softmax of a `[rows, cols]` (or `[T, B, cols]`) tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
