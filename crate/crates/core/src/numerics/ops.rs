//! Elementwise and small dense kernels, each paired with its analytic backward.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `weights · input + bias` for a single vector.
pub fn linear(weights: &Tensor, bias: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = matrix_dims(weights)?;
    if bias.len() != out_dim || input.len() != in_dim {
        return Err(Error::dim(format!(
            "linear: weights {out_dim}x{in_dim}, bias {}, input {}",
            bias.len(),
            input.len()
        )));
    }
    Ok((0..out_dim)
        .map(|i| dot(weights.row(i), input) + bias[i])
        .collect())
}

/// Backward of [`linear`]: accumulates into `d_weights`/`d_bias`, returns the input gradient.
pub fn linear_backward(
    weights: &Tensor,
    input: &[f64],
    grad_out: &[f64],
    d_weights: &mut Tensor,
    d_bias: &mut [f64],
) -> Vec<f64> {
    let in_dim = input.len();
    let mut d_input = vec![0.0; in_dim];
    for (i, &g) in grad_out.iter().enumerate() {
        d_bias[i] += g;
        axpy(g, input, d_weights.row_mut(i));
        axpy(g, weights.row(i), &mut d_input);
    }
    d_input
}

/// Applies `linear` to every row of `input` (`N x in`), producing `N x out`.
pub fn linear_rows(weights: &Tensor, bias: Option<&Tensor>, input: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = matrix_dims(weights)?;
    let n = input.shape()[0];
    if input.len() != n * in_dim {
        return Err(Error::dim(format!(
            "linear_rows: input {:?} vs weights {out_dim}x{in_dim}",
            input.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_dim {
            return Err(Error::dim("linear_rows: bias length"));
        }
    }
    let mut out = Tensor::zeros(&[n, out_dim]);
    for r in 0..n {
        let x = input.row(r);
        let y = out.row_mut(r);
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(weights.row(o), x) + bias.map_or(0.0, |b| b.data()[o]);
        }
    }
    Ok(out)
}

/// Backward of [`linear_rows`]. Gradients are accumulated.
pub fn linear_rows_backward(
    weights: &Tensor,
    input: &Tensor,
    grad_out: &Tensor,
    d_weights: &mut Tensor,
    mut d_bias: Option<&mut Tensor>,
) -> Tensor {
    let n = input.shape()[0];
    let in_dim = weights.shape()[1];
    let mut d_input = Tensor::zeros(&[n, in_dim]);
    for r in 0..n {
        let x = input.row(r);
        let g = grad_out.row(r);
        let dx = d_input.row_mut(r);
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            axpy(go, x, d_weights.row_mut(o));
            axpy(go, weights.row(o), dx);
        }
        if let Some(db) = d_bias.as_deref_mut() {
            axpy(1.0, g, db.data_mut());
        }
    }
    d_input
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match *w.shape() {
        [o, i] => Ok((o, i)),
        _ => Err(Error::dim(format!("expected a matrix, got {:?}", w.shape()))),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Softmax of `logits` restricted to each index group. Entries outside every
/// group are zero. Groups must be disjoint.
pub fn grouped_softmax(logits: &[f64], groups: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    for g in groups {
        if g.is_empty() {
            return Err(Error::Domain("softmax over an empty group".into()));
        }
        let max = g.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric("non-finite softmax logits".into()));
        }
        let mut total = 0.0;
        for &i in g {
            let e = (logits[i] - max).exp();
            out[i] = e;
            total += e;
        }
        for &i in g {
            out[i] /= total;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`grouped_softmax`] given its output.
pub fn grouped_softmax_backward(probs: &[f64], grad_out: &[f64], groups: &[Vec<usize>]) -> Vec<f64> {
    let mut d = vec![0.0; probs.len()];
    for g in groups {
        let s: f64 = g.iter().map(|&i| probs[i] * grad_out[i]).sum();
        for &i in g {
            d[i] = probs[i] * (grad_out[i] - s);
        }
    }
    d
}

/// In-place softmax over a contiguous slice.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// Backward of a contiguous softmax, written into `grad` in place.
pub fn softmax_backward_in_place(probs: &[f64], grad: &mut [f64]) {
    let s = dot(probs, grad);
    for (g, p) in grad.iter_mut().zip(probs) {
        *g = p * (*g - s);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with affine `gamma`, `beta`. Returns the output
/// and the per-row inverse standard deviations needed by the backward.
pub fn layer_norm(input: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, Vec<f64>) {
    let n = input.shape()[0];
    let c = gamma.len();
    let mut out = Tensor::zeros(&[n, c]);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let x = input.row(r);
        let mean = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let y = out.row_mut(r);
        for j in 0..c {
            y[j] = (x[j] - mean) * is * gamma[j] + beta[j];
        }
    }
    (out, inv_std)
}

/// Backward of [`layer_norm`]; accumulates parameter gradients.
pub fn layer_norm_backward(
    input: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    grad_out: &Tensor,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Tensor {
    let n = input.shape()[0];
    let c = gamma.len();
    let mut d_input = Tensor::zeros(&[n, c]);
    let mut xhat = vec![0.0; c];
    let mut g_hat = vec![0.0; c];
    for r in 0..n {
        let x = input.row(r);
        let g = grad_out.row(r);
        let mean = x.iter().sum::<f64>() / c as f64;
        let is = inv_std[r];
        for j in 0..c {
            xhat[j] = (x[j] - mean) * is;
            d_gamma[j] += g[j] * xhat[j];
            d_beta[j] += g[j];
            g_hat[j] = g[j] * gamma[j];
        }
        let mean_g = g_hat.iter().sum::<f64>() / c as f64;
        let mean_gx = dot(&g_hat, &xhat) / c as f64;
        let dx = d_input.row_mut(r);
        for j in 0..c {
            dx[j] = is * (g_hat[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    d_input
}
