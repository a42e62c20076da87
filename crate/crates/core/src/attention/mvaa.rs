//! Multi-view multi-scale adaptive attention.
//!
//! Each eye projects into every camera that sees it, and per head, scale,
//! visible view and point samples a value map at the projected location plus
//! a learned offset. The sampled values are fused with weights normalized
//! jointly over (scale, view, point) for each head, then mapped by a per-head
//! output projection and concatenated.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EyeViews, FeaturePyramid};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::ops::{self, dot};
use crate::numerics::{Taps, Tensor};
use crate::params::glorot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvaaConfig {
    /// Eye embedding width `C`.
    pub dim: usize,
    /// Pyramid channel count.
    pub value_dim: usize,
    pub heads: usize,
    pub points: usize,
    pub scales: usize,
    pub views: usize,
    /// Normalized image units per offset unit.
    pub offset_scale: f64,
}

impl MvaaConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Number of (head, scale, view, point) slots.
    pub fn slots(&self) -> usize {
        self.heads * self.scales * self.views * self.points
    }

    pub fn slot(&self, head: usize, scale: usize, view: usize, point: usize) -> usize {
        ((head * self.scales + scale) * self.views + view) * self.points + point
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.scales == 0 || self.views == 0 {
            return Err(Error::config("MVAA counts must all be at least 1"));
        }
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MvaaParams {
    pub config: MvaaConfig,
    /// Stacked value projections `W'_h`, `[C, value_dim]`; head `h` owns rows
    /// `h*d .. (h+1)*d`.
    pub value_proj: Tensor,
    /// Per-head output projections `W_h`, `[heads, d, d]`.
    pub output_proj: Tensor,
    /// Attention-weight generator, `[slots, C]`.
    pub weight_gen: Tensor,
    pub weight_bias: Tensor,
    /// Offset generator, `[slots * 2, C]`.
    pub offset_gen: Tensor,
    /// Fixed offset bias, `[heads, scales, views, points, 2]`; never trained.
    pub offset_bias: Tensor,
}

impl_params!(MvaaParams { value_proj, output_proj, weight_gen, weight_bias, offset_gen, offset_bias });

impl MvaaParams {
    /// Random projections; weight and offset generators start at zero so
    /// attention is uniform and offsets equal the fixed bias.
    pub fn new<R: Rng + ?Sized>(config: MvaaConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.head_dim();
        let mut output_proj = Tensor::zeros(&[config.heads, d, d]);
        for h in 0..config.heads {
            let w = glorot(d, d, rng);
            output_proj.data_mut()[h * d * d..(h + 1) * d * d].copy_from_slice(w.data());
        }
        Ok(MvaaParams {
            config,
            value_proj: glorot(config.dim, config.value_dim, rng),
            output_proj,
            weight_gen: Tensor::zeros(&[config.slots(), config.dim]),
            weight_bias: Tensor::zeros(&[config.slots()]),
            offset_gen: Tensor::zeros(&[config.slots() * 2, config.dim]),
            offset_bias: init_offset_bias(config.heads, config.scales, config.views, config.points)?,
        })
    }

    /// Reorders the per-view parameter slots; `order[i]` is the old view
    /// placed at new view `i`.
    pub fn permuted_views(&self, order: &[usize]) -> Result<Self> {
        let cfg = self.config;
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..cfg.views).collect::<Vec<_>>() {
            return Err(Error::Domain(format!("{order:?} is not a permutation of {} views", cfg.views)));
        }
        let mut out = self.clone();
        for h in 0..cfg.heads {
            for l in 0..cfg.scales {
                for (new, &old) in order.iter().enumerate() {
                    for k in 0..cfg.points {
                        let (a, b) = (cfg.slot(h, l, new, k), cfg.slot(h, l, old, k));
                        out.weight_gen.row_mut(a).copy_from_slice(self.weight_gen.row(b));
                        out.weight_bias.data_mut()[a] = self.weight_bias.data()[b];
                        for c in 0..2 {
                            out.offset_gen.row_mut(2 * a + c).copy_from_slice(self.offset_gen.row(2 * b + c));
                            out.offset_bias.data_mut()[2 * a + c] = self.offset_bias.data()[2 * b + c];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fixed offsets: within each (head, scale, view) the `k`-th point (counting
/// from 1) has norm `k`, pointing at angle `2π (h·N_point + k) / (N_h·N_point)`.
pub fn init_offset_bias(heads: usize, scales: usize, views: usize, points: usize) -> Result<Tensor> {
    if heads == 0 || scales == 0 || views == 0 || points == 0 {
        return Err(Error::Domain("offset bias counts must be at least 1".into()));
    }
    let mut b = Tensor::zeros(&[heads, scales, views, points, 2]);
    let total = (heads * points) as f64;
    let data = b.data_mut();
    for h in 0..heads {
        for l in 0..scales {
            for t in 0..views {
                for k in 0..points {
                    let norm = (k + 1) as f64;
                    let angle = TAU * (h * points + k + 1) as f64 / total;
                    let at = ((((h * scales + l) * views + t) * points) + k) * 2;
                    data[at] = norm * angle.cos();
                    data[at + 1] = norm * angle.sin();
                }
            }
        }
    }
    Ok(b)
}

fn head_groups(cfg: &MvaaConfig, visible: &[usize]) -> Vec<Vec<usize>> {
    (0..cfg.heads)
        .map(|h| {
            let mut g = Vec::with_capacity(cfg.scales * visible.len() * cfg.points);
            for l in 0..cfg.scales {
                for &t in visible {
                    for k in 0..cfg.points {
                        g.push(cfg.slot(h, l, t, k));
                    }
                }
            }
            g
        })
        .collect()
}

/// Attention weights for one query. Slots of invisible views are exactly
/// zero; with no visible view every weight is zero and the flag is `true`.
pub fn attention_weights(params: &MvaaParams, query: &[f64], visible: &[usize]) -> Result<(Vec<f64>, bool)> {
    let cfg = &params.config;
    if visible.is_empty() {
        return Ok((vec![0.0; cfg.slots()], true));
    }
    let logits = ops::linear(&params.weight_gen, params.weight_bias.data(), query)?;
    let probs = ops::grouped_softmax(&logits, &head_groups(cfg, visible))?;
    Ok((probs, false))
}

/// `Δr = W_r · y + b_r`, flattened as `[slots, 2]` with `(Δu, Δv)` pairs.
pub fn sampling_offsets(params: &MvaaParams, query: &[f64]) -> Result<Vec<f64>> {
    ops::linear(&params.offset_gen, params.offset_bias.data(), query)
}

struct Sample {
    slot: usize,
    head: usize,
    view: usize,
    scale: usize,
    taps: Taps,
}

struct EyeCache {
    probs: Vec<f64>,
    groups: Vec<Vec<usize>>,
    samples: Vec<Sample>,
    /// Per-head weighted sums of raw pyramid samples, `[heads * value_dim]`.
    raw: Vec<f64>,
    /// Per-head projected values `W'_h · raw_h`, `[heads * d]`.
    value: Vec<f64>,
}

/// Intermediate values needed by [`backward`].
pub struct MvaaCache {
    eyes: Vec<Option<EyeCache>>,
}

fn check_shapes(params: &MvaaParams, query: &Tensor, pyramid: &FeaturePyramid, views: &EyeViews) -> Result<()> {
    let cfg = &params.config;
    if pyramid.n_views() != cfg.views || pyramid.n_scales() != cfg.scales {
        return Err(Error::config(format!(
            "MVAA expects {} views x {} scales, pyramid has {} x {}",
            cfg.views,
            cfg.scales,
            pyramid.n_views(),
            pyramid.n_scales()
        )));
    }
    for l in 0..cfg.scales {
        if pyramid.channels(l) != cfg.value_dim {
            return Err(Error::config(format!(
                "pyramid scale {l} has {} channels, MVAA expects {}",
                pyramid.channels(l),
                cfg.value_dim
            )));
        }
    }
    if query.shape() != [views.per_eye.len(), cfg.dim] {
        return Err(Error::dim(format!(
            "MVAA query {:?} vs {} eyes x {}",
            query.shape(),
            views.per_eye.len(),
            cfg.dim
        )));
    }
    Ok(())
}

/// Forward pass over all eyes. `query` is `N_eyes x C`; blind eyes produce
/// zero rows. Sampling is linear, so raw features are aggregated first and
/// each head's value projection is applied once per eye.
pub fn forward(
    params: &MvaaParams,
    query: &Tensor,
    pyramid: &FeaturePyramid,
    views: &EyeViews,
) -> Result<(Tensor, MvaaCache)> {
    check_shapes(params, query, pyramid, views)?;
    let cfg = &params.config;
    let (d, cp) = (cfg.head_dim(), cfg.value_dim);
    let n = query.shape()[0];
    let mut out = Tensor::zeros(&[n, cfg.dim]);
    let mut eyes = Vec::with_capacity(n);
    for q in 0..n {
        let seen = &views.per_eye[q];
        if seen.is_empty() {
            eyes.push(None);
            continue;
        }
        let y = query.row(q);
        let visible: Vec<usize> = seen.iter().map(|e| e.0).collect();
        let logits = ops::linear(&params.weight_gen, params.weight_bias.data(), y)?;
        let groups = head_groups(cfg, &visible);
        let probs = ops::grouped_softmax(&logits, &groups)?;
        let offsets = sampling_offsets(params, y)?;
        let mut raw = vec![0.0; cfg.heads * cp];
        let mut samples = Vec::with_capacity(cfg.heads * cfg.scales * seen.len() * cfg.points);
        for head in 0..cfg.heads {
            for scale in 0..cfg.scales {
                for &(view, u, v) in seen {
                    let map = pyramid.map(view, scale);
                    let (mh, mw) = (map.shape()[0], map.shape()[1]);
                    for k in 0..cfg.points {
                        let slot = cfg.slot(head, scale, view, k);
                        let su = u + cfg.offset_scale * offsets[2 * slot];
                        let sv = v + cfg.offset_scale * offsets[2 * slot + 1];
                        let taps = Taps::normalized(mh, mw, su, sv);
                        taps.accumulate(map.data(), cp, probs[slot], &mut raw[head * cp..(head + 1) * cp]);
                        samples.push(Sample { slot, head, view, scale, taps });
                    }
                }
            }
        }
        let mut value = vec![0.0; cfg.heads * d];
        for head in 0..cfg.heads {
            let r = &raw[head * cp..(head + 1) * cp];
            for i in 0..d {
                value[head * d + i] = dot(params.value_proj.row(head * d + i), r);
            }
        }
        let row = out.row_mut(q);
        for head in 0..cfg.heads {
            let w = &params.output_proj.data()[head * d * d..(head + 1) * d * d];
            for i in 0..d {
                row[head * d + i] = dot(&w[i * d..(i + 1) * d], &value[head * d..(head + 1) * d]);
            }
        }
        eyes.push(Some(EyeCache { probs, groups, samples, raw, value }));
    }
    out.ensure_finite("MVAA output")?;
    Ok((out, MvaaCache { eyes }))
}

/// Backward of [`forward`]. Accumulates parameter gradients into `grads`
/// (the offset bias receives none) and returns gradients for the query and
/// the pyramid.
pub fn backward(
    params: &MvaaParams,
    query: &Tensor,
    pyramid: &FeaturePyramid,
    cache: &MvaaCache,
    grad_out: &Tensor,
    grads: &mut MvaaParams,
) -> Result<(Tensor, FeaturePyramid)> {
    let cfg = &params.config;
    let (d, cp) = (cfg.head_dim(), cfg.value_dim);
    let n = query.shape()[0];
    let mut d_query = Tensor::zeros(&[n, cfg.dim]);
    let mut d_pyramid = pyramid.zeros_like();
    let mut d_value = vec![0.0; cfg.heads * d];
    let mut d_raw = vec![0.0; cfg.heads * cp];
    let mut sample = vec![0.0; cp];
    let mut scaled = vec![0.0; cp];
    for q in 0..n {
        let Some(eye) = &cache.eyes[q] else { continue };
        let g = grad_out.row(q);
        let y = query.row(q);
        d_value.fill(0.0);
        d_raw.fill(0.0);
        for head in 0..cfg.heads {
            let base = head * d * d;
            let value = &eye.value[head * d..(head + 1) * d];
            let dv = &mut d_value[head * d..(head + 1) * d];
            for i in 0..d {
                let gi = g[head * d + i];
                let w_row = &params.output_proj.data()[base + i * d..base + (i + 1) * d];
                ops::axpy(gi, w_row, dv);
                ops::axpy(gi, value, &mut grads.output_proj.data_mut()[base + i * d..base + (i + 1) * d]);
            }
            let raw = &eye.raw[head * cp..(head + 1) * cp];
            let dr = &mut d_raw[head * cp..(head + 1) * cp];
            for i in 0..d {
                let dvi = dv[i];
                ops::axpy(dvi, params.value_proj.row(head * d + i), dr);
                ops::axpy(dvi, raw, grads.value_proj.row_mut(head * d + i));
            }
        }
        let mut d_probs = vec![0.0; cfg.slots()];
        let mut d_offsets = vec![0.0; cfg.slots() * 2];
        for s in &eye.samples {
            let map = pyramid.map(s.view, s.scale);
            let dr = &d_raw[s.head * cp..(s.head + 1) * cp];
            sample.fill(0.0);
            s.taps.accumulate(map.data(), cp, 1.0, &mut sample);
            d_probs[s.slot] = dot(dr, &sample);
            let a = eye.probs[s.slot];
            for (o, x) in scaled.iter_mut().zip(dr) {
                *o = a * x;
            }
            s.taps.scatter(d_pyramid.map_mut(s.view, s.scale).data_mut(), cp, 1.0, &scaled);
            let (dv, du) = s.taps.location_grad(map.data(), cp, &scaled);
            d_offsets[2 * s.slot] = cfg.offset_scale * du;
            d_offsets[2 * s.slot + 1] = cfg.offset_scale * dv;
        }
        let d_logits = ops::grouped_softmax_backward(&eye.probs, &d_probs, &eye.groups);
        let dq = d_query.row_mut(q);
        let wb = grads.weight_bias.data_mut();
        for (slot, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            wb[slot] += dl;
            ops::axpy(dl, y, grads.weight_gen.row_mut(slot));
            ops::axpy(dl, params.weight_gen.row(slot), dq);
        }
        for (r, &dr) in d_offsets.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            ops::axpy(dr, y, grads.offset_gen.row_mut(r));
            ops::axpy(dr, params.offset_gen.row(r), dq);
        }
    }
    Ok((d_query, d_pyramid))
}

/// MVAA output for every eye (zero rows for blind eyes).
pub fn mvaa(query: &Tensor, pyramid: &FeaturePyramid, views: &EyeViews, params: &MvaaParams) -> Result<Tensor> {
    forward(params, query, pyramid, views).map(|(out, _)| out)
}
