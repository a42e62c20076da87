//! Multi-head scaled dot-product attention restricted to the eyes of a single
//! polar ray.

use rand::Rng;

use crate::error::{Error, Result};
use crate::eyes::EyeGrid;
use crate::impl_params;
use crate::numerics::ops::{self, axpy, dot};
use crate::numerics::Tensor;
use crate::params::glorot;

#[derive(Clone, Debug, PartialEq)]
pub struct PolarParams {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl_params!(PolarParams { wq, bq, wk, bk, wv, bv, wo, bo });

impl PolarParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(PolarParams {
            heads,
            wq: glorot(dim, dim, rng),
            bq: Tensor::zeros(&[dim]),
            wk: glorot(dim, dim, rng),
            bk: Tensor::zeros(&[dim]),
            wv: glorot(dim, dim, rng),
            bv: Tensor::zeros(&[dim]),
            wo: glorot(dim, dim, rng),
            bo: Tensor::zeros(&[dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

pub struct PolarCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `probs[(ray * heads + h)]` is an `R x R` row-major matrix.
    probs: Vec<Vec<f64>>,
    mixed: Tensor,
}

pub fn forward(params: &PolarParams, grid: &EyeGrid, x: &Tensor) -> Result<(Tensor, PolarCache)> {
    let (r, s) = (grid.radial(), grid.rays());
    let c = params.dim();
    if x.shape() != [r * s, c] {
        return Err(Error::dim(format!("polar attention input {:?}, expected [{}, {c}]", x.shape(), r * s)));
    }
    let heads = params.heads;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let q = ops::linear_rows(&params.wq, Some(&params.bq), x)?;
    let k = ops::linear_rows(&params.wk, Some(&params.bk), x)?;
    let v = ops::linear_rows(&params.wv, Some(&params.bv), x)?;
    let mut mixed = Tensor::zeros(&[r * s, c]);
    let mut probs = Vec::with_capacity(s * heads);
    for ray in 0..s {
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let mut p = vec![0.0; r * r];
            for a in 0..r {
                let qa = &q.row(a * s + ray)[cols.clone()];
                let row = &mut p[a * r..(a + 1) * r];
                for (b, pv) in row.iter_mut().enumerate() {
                    *pv = scale * dot(qa, &k.row(b * s + ray)[cols.clone()]);
                }
                ops::softmax_in_place(row);
                let out = &mut mixed.row_mut(a * s + ray)[cols.clone()];
                for (b, &w) in row.iter().enumerate() {
                    axpy(w, &v.row(b * s + ray)[cols.clone()], out);
                }
            }
            probs.push(p);
        }
    }
    let out = ops::linear_rows(&params.wo, Some(&params.bo), &mixed)?;
    Ok((out, PolarCache { q, k, v, probs, mixed }))
}

pub fn backward(
    params: &PolarParams,
    grid: &EyeGrid,
    x: &Tensor,
    cache: &PolarCache,
    grad_out: &Tensor,
    grads: &mut PolarParams,
) -> Result<Tensor> {
    let (r, s) = (grid.radial(), grid.rays());
    let c = params.dim();
    let heads = params.heads;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let d_mixed = ops::linear_rows_backward(&params.wo, &cache.mixed, grad_out, &mut grads.wo, Some(&mut grads.bo));
    let mut dq = Tensor::zeros(&[r * s, c]);
    let mut dk = Tensor::zeros(&[r * s, c]);
    let mut dv = Tensor::zeros(&[r * s, c]);
    let mut dp = vec![0.0; r];
    for ray in 0..s {
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let p = &cache.probs[ray * heads + h];
            for a in 0..r {
                let ia = a * s + ray;
                let g = &d_mixed.row(ia)[cols.clone()];
                let pa = &p[a * r..(a + 1) * r];
                for b in 0..r {
                    let ib = b * s + ray;
                    dp[b] = dot(g, &cache.v.row(ib)[cols.clone()]);
                    axpy(pa[b], g, &mut dv.row_mut(ib)[cols.clone()]);
                }
                ops::softmax_backward_in_place(pa, &mut dp);
                for b in 0..r {
                    let ib = b * s + ray;
                    let ds = scale * dp[b];
                    axpy(ds, &cache.k.row(ib)[cols.clone()], &mut dq.row_mut(ia)[cols.clone()]);
                    axpy(ds, &cache.q.row(ia)[cols.clone()], &mut dk.row_mut(ib)[cols.clone()]);
                }
            }
        }
    }
    let mut dx = ops::linear_rows_backward(&params.wq, x, &dq, &mut grads.wq, Some(&mut grads.bq));
    dx.add_assign(&ops::linear_rows_backward(&params.wk, x, &dk, &mut grads.wk, Some(&mut grads.bk)));
    dx.add_assign(&ops::linear_rows_backward(&params.wv, x, &dv, &mut grads.wv, Some(&mut grads.bv)));
    Ok(dx)
}

/// Attention update for every eye, `N_eyes x C`.
pub fn polar_attention(x: &Tensor, grid: &EyeGrid, params: &PolarParams) -> Result<Tensor> {
    forward(params, grid, x).map(|(out, _)| out)
}
