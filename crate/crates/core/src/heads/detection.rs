//! Center-heatmap detection head: a shared 1x1 layer with GELU, then one
//! 1x1 projection per sub-task group to class logits plus box regression.

use rand::Rng;

use crate::boxes::REG_CHANNELS;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::ops::{self, gelu, gelu_grad, sigmoid};
use crate::numerics::Tensor;
use crate::params::glorot;

/// Initial heatmap logit, sigmoid ≈ 0.1.
pub const HEATMAP_BIAS_INIT: f64 = -2.19;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupHead {
    /// `[classes + 10, C]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl_params!(GroupHead { weight, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionParams {
    pub shared: Tensor,
    pub shared_bias: Tensor,
    pub groups: Vec<GroupHead>,
}

impl_params!(DetectionParams { shared, shared_bias } nested { groups });

impl DetectionParams {
    /// `group_sizes[g]` is the number of classes in group `g`.
    pub fn new<R: Rng + ?Sized>(dim: usize, group_sizes: &[usize], rng: &mut R) -> Result<Self> {
        if dim == 0 || group_sizes.is_empty() || group_sizes.contains(&0) {
            return Err(Error::config("detection head needs channels and non-empty groups"));
        }
        let groups = group_sizes
            .iter()
            .map(|&n| {
                let mut weight = glorot(n + REG_CHANNELS, dim, rng);
                weight.scale_assign(0.1);
                let mut bias = Tensor::zeros(&[n + REG_CHANNELS]);
                bias.data_mut()[..n].fill(HEATMAP_BIAS_INIT);
                GroupHead { weight, bias }
            })
            .collect();
        Ok(DetectionParams { shared: glorot(dim, dim, rng), shared_bias: Tensor::zeros(&[dim]), groups })
    }

    pub fn group_classes(&self, g: usize) -> usize {
        self.groups[g].weight.shape()[0] - REG_CHANNELS
    }
}

/// Raw head outputs. `groups[g]` is `side^2 x (classes_g + 10)`: heatmap
/// logits first, then the regression channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DetOutput {
    pub side: usize,
    pub groups: Vec<Tensor>,
}

impl DetOutput {
    pub fn zeros_like(&self) -> Self {
        DetOutput { side: self.side, groups: self.groups.iter().map(Tensor::zeros_like).collect() }
    }

    pub fn classes(&self, g: usize) -> usize {
        self.groups[g].shape()[1] - REG_CHANNELS
    }

    pub fn logit(&self, g: usize, cell: usize, class: usize) -> f64 {
        self.groups[g].row(cell)[class]
    }

    /// Sigmoid heatmap of group `g` as `side x side x classes`.
    pub fn heatmap(&self, g: usize) -> Tensor {
        let n = self.classes(g);
        let mut out = Tensor::zeros(&[self.side, self.side, n]);
        for (cell, px) in out.data_mut().chunks_mut(n).enumerate() {
            for (k, v) in px.iter_mut().enumerate() {
                *v = sigmoid(self.logit(g, cell, k));
            }
        }
        out
    }

    pub fn regression(&self, g: usize, cell: usize) -> &[f64] {
        &self.groups[g].row(cell)[self.classes(g)..]
    }
}

pub struct DetectionCache {
    rows: Tensor,
    pre: Tensor,
    act: Tensor,
}

pub fn forward(params: &DetectionParams, features: &Tensor) -> Result<(DetOutput, DetectionCache)> {
    let [side, side2, c] = *features.shape() else {
        return Err(Error::dim(format!("detection head expects HxWxC, got {:?}", features.shape())));
    };
    if side != side2 {
        return Err(Error::dim("detection head expects a square map"));
    }
    let rows = features.clone().reshape(&[side * side, c])?;
    let pre = ops::linear_rows(&params.shared, Some(&params.shared_bias), &rows)?;
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let groups = params
        .groups
        .iter()
        .map(|g| ops::linear_rows(&g.weight, Some(&g.bias), &act))
        .collect::<Result<Vec<_>>>()?;
    Ok((DetOutput { side, groups }, DetectionCache { rows, pre, act }))
}

pub fn backward(
    params: &DetectionParams,
    cache: &DetectionCache,
    grad_out: &DetOutput,
    grads: &mut DetectionParams,
) -> Result<Tensor> {
    let mut d_act = Tensor::zeros_like(&cache.act);
    for ((g, gg), go) in params.groups.iter().zip(grads.groups.iter_mut()).zip(&grad_out.groups) {
        d_act.add_assign(&ops::linear_rows_backward(&g.weight, &cache.act, go, &mut gg.weight, Some(&mut gg.bias)));
    }
    for (d, z) in d_act.data_mut().iter_mut().zip(cache.pre.data()) {
        *d *= gelu_grad(*z);
    }
    let d_rows =
        ops::linear_rows_backward(&params.shared, &cache.rows, &d_act, &mut grads.shared, Some(&mut grads.shared_bias));
    let side = grad_out.side;
    d_rows.reshape(&[side, side, params.shared.shape()[1]])
}

pub fn detection_head(features: &Tensor, params: &DetectionParams) -> Result<DetOutput> {
    forward(params, features).map(|(o, _)| o)
}
