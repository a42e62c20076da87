//! Progressive up-sampling segmentation head. Each element has its own
//! branch of (1x1 conv, layer norm, GELU, bilinear upsample) blocks whose
//! factors multiply to the requested ratio, then a 1x1 to one logit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::ops::{self, gelu, gelu_grad, layer_norm, layer_norm_backward};
use crate::numerics::sample::{upsample_bilinear, upsample_bilinear_backward};
use crate::numerics::Tensor;
use crate::params::{glorot, LayerNormParams};

/// Splits `ratio` into upsampling factors of 3 and 2.
pub fn upsample_factors(ratio: usize) -> Result<Vec<usize>> {
    if ratio == 0 {
        return Err(Error::config("upsample ratio must be positive"));
    }
    let mut rest = ratio;
    let mut factors = Vec::new();
    for f in [3, 2] {
        while rest % f == 0 {
            factors.push(f);
            rest /= f;
        }
    }
    if rest != 1 {
        return Err(Error::config(format!("upsample ratio {ratio} is not a product of 2s and 3s")));
    }
    Ok(factors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegBlock {
    pub factor: usize,
    /// `[hidden, cin]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: LayerNormParams,
}

impl_params!(SegBlock { weight, bias } nested { norm });

#[derive(Clone, Debug, PartialEq)]
pub struct SegBranch {
    pub blocks: Vec<SegBlock>,
    /// `[1, hidden]` (or `[1, C]` without blocks)
    pub out: Tensor,
    pub out_bias: Tensor,
}

impl_params!(SegBranch { out, out_bias } nested { blocks });

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationParams {
    pub ratio: usize,
    pub branches: Vec<SegBranch>,
}

impl_params!(SegmentationParams {} nested { branches });

impl SegmentationParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, elements: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::config("segmentation head widths must be positive"));
        }
        let factors = upsample_factors(ratio)?;
        let branches = (0..elements)
            .map(|_| {
                let mut cin = dim;
                let blocks = factors
                    .iter()
                    .map(|&factor| {
                        let b = SegBlock {
                            factor,
                            weight: glorot(hidden, cin, rng),
                            bias: Tensor::zeros(&[hidden]),
                            norm: LayerNormParams::new(hidden),
                        };
                        cin = hidden;
                        b
                    })
                    .collect();
                SegBranch { blocks, out: glorot(1, cin, rng), out_bias: Tensor::zeros(&[1]) }
            })
            .collect();
        Ok(SegmentationParams { ratio, branches })
    }

    pub fn elements(&self) -> usize {
        self.branches.len()
    }
}

struct BlockCache {
    side: usize,
    rows: Tensor,
    pre: Tensor,
    inv_std: Vec<f64>,
    normed: Tensor,
}

struct BranchCache {
    blocks: Vec<BlockCache>,
    last: Tensor,
}

pub struct SegmentationCache {
    side: usize,
    channels: usize,
    branches: Vec<BranchCache>,
}

pub fn forward(params: &SegmentationParams, features: &Tensor) -> Result<(Vec<Tensor>, SegmentationCache)> {
    let [side, side2, c] = *features.shape() else {
        return Err(Error::dim(format!("segmentation head expects HxWxC, got {:?}", features.shape())));
    };
    if side != side2 {
        return Err(Error::dim("segmentation head expects a square map"));
    }
    let mut outs = Vec::with_capacity(params.elements());
    let mut caches = Vec::with_capacity(params.elements());
    for br in &params.branches {
        let mut s = side;
        let mut rows = features.clone().reshape(&[side * side, c])?;
        let mut blocks = Vec::with_capacity(br.blocks.len());
        for b in &br.blocks {
            let hidden = b.weight.shape()[0];
            let pre = ops::linear_rows(&b.weight, Some(&b.bias), &rows)?;
            let (normed, inv_std) = layer_norm(&pre, b.norm.gamma.data(), b.norm.beta.data());
            let mut act = normed.clone();
            act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let up = upsample_bilinear(&act.reshape(&[s, s, hidden])?, b.factor)?;
            blocks.push(BlockCache { side: s, rows, pre, inv_std, normed });
            s *= b.factor;
            rows = up.reshape(&[s * s, hidden])?;
        }
        let logits = ops::linear_rows(&br.out, Some(&br.out_bias), &rows)?.reshape(&[s, s])?;
        outs.push(logits);
        caches.push(BranchCache { blocks, last: rows });
    }
    Ok((outs, SegmentationCache { side, channels: c, branches: caches }))
}

pub fn backward(
    params: &SegmentationParams,
    cache: &SegmentationCache,
    grad_out: &[Tensor],
    grads: &mut SegmentationParams,
) -> Result<Tensor> {
    let (side, c) = (cache.side, cache.channels);
    let mut d_features = Tensor::zeros(&[side * side, c]);
    for (((br, bc), gb), go) in params.branches.iter().zip(&cache.branches).zip(grads.branches.iter_mut()).zip(grad_out) {
        let n_out = bc.last.shape()[0];
        let go = go.clone().reshape(&[n_out, 1])?;
        let mut d_rows = ops::linear_rows_backward(&br.out, &bc.last, &go, &mut gb.out, Some(&mut gb.out_bias));
        for ((b, blk), gblk) in br.blocks.iter().zip(&bc.blocks).zip(gb.blocks.iter_mut()).rev() {
            let hidden = b.weight.shape()[0];
            let s = blk.side;
            let d_up = d_rows.reshape(&[s * b.factor, s * b.factor, hidden])?;
            let mut d_act = upsample_bilinear_backward(&d_up, s, s, b.factor).reshape(&[s * s, hidden])?;
            for (d, z) in d_act.data_mut().iter_mut().zip(blk.normed.data()) {
                *d *= gelu_grad(*z);
            }
            let d_pre = layer_norm_backward(
                &blk.pre,
                &blk.inv_std,
                b.norm.gamma.data(),
                &d_act,
                gblk.norm.gamma.data_mut(),
                gblk.norm.beta.data_mut(),
            );
            d_rows = ops::linear_rows_backward(&b.weight, &blk.rows, &d_pre, &mut gblk.weight, Some(&mut gblk.bias));
        }
        d_features.add_assign(&d_rows);
    }
    d_features.reshape(&[side, side, c])
}

/// One `(side·ratio) x (side·ratio)` logit raster per element.
pub fn segmentation_head(features: &Tensor, params: &SegmentationParams) -> Result<Vec<Tensor>> {
    forward(params, features).map(|(o, _)| o)
}
