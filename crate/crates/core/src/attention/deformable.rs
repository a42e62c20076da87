//! Deformable self-attention over the `R x S` eye map.
//!
//! Each eye predicts per-head sampling offsets (in eye-grid cells, radial
//! then angular) around its own grid location and softmax weights over its
//! points. The radial axis clamps, the angular axis wraps.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eyes::EyeGrid;
use crate::impl_params;
use crate::numerics::ops::{self, axpy, dot};
use crate::numerics::{Border, Taps, Tensor};
use crate::params::glorot;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformableParams {
    pub heads: usize,
    pub points: usize,
    pub value: Tensor,
    pub value_bias: Tensor,
    /// `[heads * points, C]`
    pub weight_gen: Tensor,
    pub weight_bias: Tensor,
    /// `[heads * points * 2, C]`
    pub offset_gen: Tensor,
    /// Fixed `[heads, points, 2]` bias with `|b[h, k]| = k + 1`.
    pub offset_bias: Tensor,
    pub out: Tensor,
    pub out_bias: Tensor,
}

impl_params!(DeformableParams { value, value_bias, weight_gen, weight_bias, offset_gen, offset_bias, out, out_bias });

impl DeformableParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, points: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || points == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "deformable attention: dim {dim}, {heads} heads, {points} points"
            )));
        }
        let mut offset_bias = Tensor::zeros(&[heads, points, 2]);
        let total = (heads * points) as f64;
        for h in 0..heads {
            for k in 0..points {
                let angle = TAU * (h * points + k + 1) as f64 / total;
                let norm = (k + 1) as f64;
                let at = (h * points + k) * 2;
                offset_bias.data_mut()[at] = norm * angle.cos();
                offset_bias.data_mut()[at + 1] = norm * angle.sin();
            }
        }
        Ok(DeformableParams {
            heads,
            points,
            value: glorot(dim, dim, rng),
            value_bias: Tensor::zeros(&[dim]),
            weight_gen: Tensor::zeros(&[heads * points, dim]),
            weight_bias: Tensor::zeros(&[heads * points]),
            offset_gen: Tensor::zeros(&[heads * points * 2, dim]),
            offset_bias,
            out: glorot(dim, dim, rng),
            out_bias: Tensor::zeros(&[dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.value.shape()[0]
    }
}

pub struct DeformableCache {
    /// Per-head `N_eyes x d` value maps.
    values: Vec<Tensor>,
    probs: Vec<Vec<f64>>,
    taps: Vec<Vec<Taps>>,
    agg: Tensor,
}

fn split_heads(v: &Tensor, heads: usize) -> Vec<Tensor> {
    let (n, c) = (v.shape()[0], v.shape()[1]);
    let d = c / heads;
    (0..heads)
        .map(|h| {
            let mut m = Tensor::zeros(&[n, d]);
            for q in 0..n {
                m.row_mut(q).copy_from_slice(&v.row(q)[h * d..(h + 1) * d]);
            }
            m
        })
        .collect()
}

pub fn forward(params: &DeformableParams, grid: &EyeGrid, x: &Tensor) -> Result<(Tensor, DeformableCache)> {
    let (r, s) = (grid.radial(), grid.rays());
    let c = params.dim();
    if x.shape() != [r * s, c] {
        return Err(Error::dim(format!("deformable attention input {:?}, expected [{}, {c}]", x.shape(), r * s)));
    }
    let (heads, points) = (params.heads, params.points);
    let d = c / heads;
    let values = split_heads(&ops::linear_rows(&params.value, Some(&params.value_bias), x)?, heads);
    let mut agg = Tensor::zeros(&[r * s, c]);
    let mut probs = Vec::with_capacity(r * s);
    let mut all_taps = Vec::with_capacity(r * s);
    for q in 0..r * s {
        let (i, j) = ((q / s) as f64, (q % s) as f64);
        let y = x.row(q);
        let mut p = ops::linear(&params.weight_gen, params.weight_bias.data(), y)?;
        for h in 0..heads {
            ops::softmax_in_place(&mut p[h * points..(h + 1) * points]);
        }
        let off = ops::linear(&params.offset_gen, params.offset_bias.data(), y)?;
        let mut taps = Vec::with_capacity(heads * points);
        let row = agg.row_mut(q);
        for h in 0..heads {
            for k in 0..points {
                let slot = h * points + k;
                let t = Taps::new(r, s, i + off[2 * slot], j + off[2 * slot + 1], Border::Clamp, Border::Wrap);
                t.accumulate(values[h].data(), d, p[slot], &mut row[h * d..(h + 1) * d]);
                taps.push(t);
            }
        }
        probs.push(p);
        all_taps.push(taps);
    }
    let out = ops::linear_rows(&params.out, Some(&params.out_bias), &agg)?;
    Ok((out, DeformableCache { values, probs, taps: all_taps, agg }))
}

pub fn backward(
    params: &DeformableParams,
    grid: &EyeGrid,
    x: &Tensor,
    cache: &DeformableCache,
    grad_out: &Tensor,
    grads: &mut DeformableParams,
) -> Result<Tensor> {
    let n = grid.len();
    let c = params.dim();
    let (heads, points) = (params.heads, params.points);
    let d = c / heads;
    let d_agg = ops::linear_rows_backward(&params.out, &cache.agg, grad_out, &mut grads.out, Some(&mut grads.out_bias));
    let mut d_values: Vec<Tensor> = cache.values.iter().map(Tensor::zeros_like).collect();
    let mut dx = Tensor::zeros(&[n, c]);
    let mut sample = vec![0.0; d];
    let mut scaled = vec![0.0; d];
    for q in 0..n {
        let g = d_agg.row(q);
        let p = &cache.probs[q];
        let mut d_logits = vec![0.0; heads * points];
        let mut d_off = vec![0.0; heads * points * 2];
        for h in 0..heads {
            let gh = &g[h * d..(h + 1) * d];
            for k in 0..points {
                let slot = h * points + k;
                let t = &cache.taps[q][slot];
                sample.iter_mut().for_each(|v| *v = 0.0);
                t.accumulate(cache.values[h].data(), d, 1.0, &mut sample);
                d_logits[slot] = dot(gh, &sample);
                for (o, v) in scaled.iter_mut().zip(gh) {
                    *o = p[slot] * v;
                }
                t.scatter(d_values[h].data_mut(), d, 1.0, &scaled);
                let (dr, dc) = t.location_grad(cache.values[h].data(), d, &scaled);
                d_off[2 * slot] = dr;
                d_off[2 * slot + 1] = dc;
            }
            ops::softmax_backward_in_place(&p[h * points..(h + 1) * points], &mut d_logits[h * points..(h + 1) * points]);
        }
        let y = x.row(q);
        let dq = dx.row_mut(q);
        for (slot, &dl) in d_logits.iter().enumerate() {
            grads.weight_bias.data_mut()[slot] += dl;
            axpy(dl, y, grads.weight_gen.row_mut(slot));
            axpy(dl, params.weight_gen.row(slot), dq);
        }
        for (o, &dr) in d_off.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            axpy(dr, y, grads.offset_gen.row_mut(o));
            axpy(dr, params.offset_gen.row(o), dq);
        }
    }
    let mut dv = Tensor::zeros(&[n, c]);
    for (h, m) in d_values.iter().enumerate() {
        for q in 0..n {
            dv.row_mut(q)[h * d..(h + 1) * d].copy_from_slice(m.row(q));
        }
    }
    dx.add_assign(&ops::linear_rows_backward(&params.value, x, &dv, &mut grads.value, Some(&mut grads.value_bias)));
    Ok(dx)
}

/// Deformable self-attention update for every eye, `N_eyes x C`.
pub fn deformable_self_attention(x: &Tensor, grid: &EyeGrid, params: &DeformableParams) -> Result<Tensor> {
    forward(params, grid, x).map(|(out, _)| out)
}
