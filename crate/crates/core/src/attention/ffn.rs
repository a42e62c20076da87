//! Feed-forward block with a depth-wise 3x3 convolution over the eye map:
//! expand, convolve (radial zero padding, angular wrap), GELU, contract.

use rand::Rng;

use crate::error::{Error, Result};
use crate::eyes::EyeGrid;
use crate::impl_params;
use crate::numerics::conv::{depthwise_conv2d, depthwise_conv2d_backward};
use crate::numerics::ops::{self, gelu, gelu_grad};
use crate::numerics::{ConvSpec, Pad, Tensor};
use crate::params::glorot;

pub const FFN_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    /// `[E, C]`
    pub expand: Tensor,
    pub expand_bias: Tensor,
    /// `[3, 3, E]`
    pub dw: Tensor,
    pub dw_bias: Tensor,
    /// `[C, E]`
    pub contract: Tensor,
    pub contract_bias: Tensor,
}

impl_params!(FfnParams { expand, expand_bias, dw, dw_bias, contract, contract_bias });

impl FfnParams {
    /// Depth-wise kernel starts as the identity (center tap 1).
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::config("FFN widths must be positive"));
        }
        let mut dw = Tensor::zeros(&[FFN_KERNEL, FFN_KERNEL, hidden]);
        let center = (FFN_KERNEL / 2) * FFN_KERNEL + FFN_KERNEL / 2;
        dw.data_mut()[center * hidden..(center + 1) * hidden].fill(1.0);
        Ok(FfnParams {
            expand: glorot(hidden, dim, rng),
            expand_bias: Tensor::zeros(&[hidden]),
            dw,
            dw_bias: Tensor::zeros(&[hidden]),
            contract: glorot(dim, hidden, rng),
            contract_bias: Tensor::zeros(&[dim]),
        })
    }

    pub fn hidden(&self) -> usize {
        self.expand.shape()[0]
    }
}

fn spec() -> ConvSpec {
    ConvSpec { stride: 1, row_pad: Pad::Zero, col_pad: Pad::Wrap }
}

pub struct FfnCache {
    hidden: Tensor,
    conv: Tensor,
    act: Tensor,
}

pub fn forward(params: &FfnParams, grid: &EyeGrid, x: &Tensor) -> Result<(Tensor, FfnCache)> {
    let (r, s) = (grid.radial(), grid.rays());
    let e = params.hidden();
    if x.rank() != 2 || x.shape()[0] != r * s {
        return Err(Error::dim(format!("FFN input {:?} does not match {r}x{s} eyes", x.shape())));
    }
    let hidden = ops::linear_rows(&params.expand, Some(&params.expand_bias), x)?.reshape(&[r, s, e])?;
    let conv = depthwise_conv2d(&hidden, &params.dw, Some(&params.dw_bias), spec())?;
    let mut act = conv.clone().reshape(&[r * s, e])?;
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = ops::linear_rows(&params.contract, Some(&params.contract_bias), &act)?;
    Ok((out, FfnCache { hidden, conv, act }))
}

pub fn backward(
    params: &FfnParams,
    grid: &EyeGrid,
    x: &Tensor,
    cache: &FfnCache,
    grad_out: &Tensor,
    grads: &mut FfnParams,
) -> Result<Tensor> {
    let (r, s) = (grid.radial(), grid.rays());
    let e = params.hidden();
    let mut d_act = ops::linear_rows_backward(
        &params.contract,
        &cache.act,
        grad_out,
        &mut grads.contract,
        Some(&mut grads.contract_bias),
    );
    for (g, z) in d_act.data_mut().iter_mut().zip(cache.conv.data()) {
        *g *= gelu_grad(*z);
    }
    let d_conv = d_act.reshape(&[r, s, e])?;
    let d_hidden = depthwise_conv2d_backward(
        &cache.hidden,
        &params.dw,
        spec(),
        &d_conv,
        &mut grads.dw,
        Some(&mut grads.dw_bias),
    )?
    .reshape(&[r * s, e])?;
    Ok(ops::linear_rows_backward(&params.expand, x, &d_hidden, &mut grads.expand, Some(&mut grads.expand_bias)))
}

/// FFN update for every eye, `N_eyes x C`.
pub fn ffn_dwconv(x: &Tensor, grid: &EyeGrid, params: &FfnParams) -> Result<Tensor> {
    forward(params, grid, x).map(|(out, _)| out)
}
