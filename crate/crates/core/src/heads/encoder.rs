//! Residual bottleneck stack over the rectangular BEV map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::conv::{conv2d, conv2d_backward};
use crate::numerics::ops::{self, gelu, gelu_grad};
use crate::numerics::{ConvSpec, Pad, Tensor};
use crate::params::glorot;

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams {
    /// `[C/2, C]`
    pub reduce: Tensor,
    pub reduce_bias: Tensor,
    /// `[3, 3, C/2, C/2]`
    pub conv: Tensor,
    pub conv_bias: Tensor,
    /// `[C, C/2]`, zero at init
    pub expand: Tensor,
    pub expand_bias: Tensor,
}

impl_params!(BottleneckParams { reduce, reduce_bias, conv, conv_bias, expand, expand_bias });

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<BottleneckParams>,
}

impl_params!(EncoderParams {} nested { blocks });

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, blocks: usize, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("BEV encoder needs at least 2 channels"));
        }
        let mid = dim / 2;
        let bound = (6.0 / (18 * mid) as f64).sqrt();
        let blocks = (0..blocks)
            .map(|_| BottleneckParams {
                reduce: glorot(mid, dim, rng),
                reduce_bias: Tensor::zeros(&[mid]),
                conv: Tensor::uniform(&[3, 3, mid, mid], bound, rng),
                conv_bias: Tensor::zeros(&[mid]),
                expand: Tensor::zeros(&[dim, mid]),
                expand_bias: Tensor::zeros(&[dim]),
            })
            .collect();
        Ok(EncoderParams { blocks })
    }
}

fn spec() -> ConvSpec {
    ConvSpec::same(Pad::Zero)
}

struct BlockCache {
    input: Tensor,
    reduced: Tensor,
    reduced_act: Tensor,
    conv: Tensor,
    conv_act: Tensor,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    mask: Vec<bool>,
}

fn dims(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w, c] if h == w => Ok((h, c)),
        _ => Err(Error::dim(format!("BEV encoder expects a square HxWxC map, got {:?}", x.shape()))),
    }
}

fn apply_mask(x: &mut Tensor, mask: &[bool]) {
    let c = x.shape()[2];
    for (px, &m) in x.data_mut().chunks_mut(c).zip(mask) {
        if !m {
            px.fill(0.0);
        }
    }
}

fn gelu_of(t: &Tensor) -> Tensor {
    let mut a = t.clone();
    a.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    a
}

pub fn forward(params: &EncoderParams, x: &Tensor, mask: &[bool]) -> Result<(Tensor, EncoderCache)> {
    let (side, c) = dims(x)?;
    if mask.len() != side * side {
        return Err(Error::dim(format!("mask has {} cells for a {side}x{side} map", mask.len())));
    }
    let mut cur = x.clone();
    apply_mask(&mut cur, mask);
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let mid = b.reduce.shape()[0];
        let rows = cur.clone().reshape(&[side * side, c])?;
        let reduced = ops::linear_rows(&b.reduce, Some(&b.reduce_bias), &rows)?.reshape(&[side, side, mid])?;
        let reduced_act = gelu_of(&reduced);
        let conv = conv2d(&reduced_act, &b.conv, Some(&b.conv_bias), spec())?;
        let conv_act = gelu_of(&conv);
        let flat = conv_act.clone().reshape(&[side * side, mid])?;
        let update = ops::linear_rows(&b.expand, Some(&b.expand_bias), &flat)?.reshape(&[side, side, c])?;
        let input = cur.clone();
        cur.add_assign(&update);
        caches.push(BlockCache { input, reduced, reduced_act, conv, conv_act });
    }
    Ok((cur, EncoderCache { blocks: caches, mask: mask.to_vec() }))
}

pub fn backward(params: &EncoderParams, cache: &EncoderCache, grad_out: &Tensor, grads: &mut EncoderParams) -> Result<Tensor> {
    let (side, c) = dims(grad_out)?;
    let mut g = grad_out.clone();
    for ((b, bc), gb) in params.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
        let mid = b.reduce.shape()[0];
        let n = side * side;
        let d_flat = ops::linear_rows_backward(
            &b.expand,
            &bc.conv_act.clone().reshape(&[n, mid])?,
            &g.clone().reshape(&[n, c])?,
            &mut gb.expand,
            Some(&mut gb.expand_bias),
        );
        let mut d_conv = d_flat.reshape(&[side, side, mid])?;
        for (d, z) in d_conv.data_mut().iter_mut().zip(bc.conv.data()) {
            *d *= gelu_grad(*z);
        }
        let mut d_red = conv2d_backward(&bc.reduced_act, &b.conv, spec(), &d_conv, &mut gb.conv, Some(&mut gb.conv_bias))?;
        for (d, z) in d_red.data_mut().iter_mut().zip(bc.reduced.data()) {
            *d *= gelu_grad(*z);
        }
        let d_in = ops::linear_rows_backward(
            &b.reduce,
            &bc.input.clone().reshape(&[n, c])?,
            &d_red.reshape(&[n, mid])?,
            &mut gb.reduce,
            Some(&mut gb.reduce_bias),
        );
        g.add_assign(&d_in.reshape(&[side, side, c])?);
    }
    apply_mask(&mut g, &cache.mask);
    Ok(g)
}

/// Encodes a `side x side x C` BEV map; cells with a false mask are zeroed
/// before the first block.
pub fn bev_encoder(features: &Tensor, mask: &[bool], params: &EncoderParams) -> Result<Tensor> {
    forward(params, features, mask).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_blocks_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::new(4, 2, &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 5, 4], 1.0, &mut rng);
        let mut mask = vec![true; 25];
        mask[3] = false;
        let out = bev_encoder(&x, &mask, &p).unwrap();
        let mut want = x;
        apply_mask(&mut want, &mask);
        assert_eq!(out, want);
    }

    #[test]
    fn non_square_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::new(4, 1, &mut rng).unwrap();
        assert!(bev_encoder(&Tensor::zeros(&[4, 5, 4]), &[true; 20], &p).is_err());
    }
}
