//! Convolution-only stand-in for an image backbone: a stride-1 3x3
//! convolution gives scale 0, each further scale is GELU then a stride-2 3x3
//! convolution. Borders replicate, so constant images give constant maps.

use std::path::Path;

use rand::Rng;

use crate::attention::FeaturePyramid;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::conv::{conv2d, conv2d_backward};
use crate::numerics::ops::{gelu, gelu_grad};
use crate::numerics::{ConvSpec, Pad, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[3, 3, cin, cout]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl_params!(ConvLayer { weight, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub convs: Vec<ConvLayer>,
}

impl_params!(PyramidParams {} nested { convs });

impl PyramidParams {
    pub fn new<R: Rng + ?Sized>(scales: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if scales == 0 || channels == 0 {
            return Err(Error::config("pyramid needs at least one scale and one channel"));
        }
        let convs = (0..scales)
            .map(|l| {
                let cin = if l == 0 { IMAGE_CHANNELS } else { channels };
                let bound = (6.0 / (9 * (cin + channels)) as f64).sqrt();
                ConvLayer {
                    weight: Tensor::uniform(&[3, 3, cin, channels], bound, rng),
                    bias: Tensor::zeros(&[channels]),
                }
            })
            .collect();
        Ok(PyramidParams { convs })
    }

    pub fn scales(&self) -> usize {
        self.convs.len()
    }

    pub fn channels(&self) -> usize {
        self.convs[0].weight.shape()[3]
    }
}

fn spec(scale: usize) -> ConvSpec {
    if scale == 0 {
        ConvSpec::same(Pad::Replicate)
    } else {
        ConvSpec::strided(2, Pad::Replicate)
    }
}

/// Per-view intermediates for the backward.
pub struct PyramidCache {
    /// `pre[view][scale]`: convolution outputs before the next GELU.
    pre: Vec<Vec<Tensor>>,
}

fn check_extent(h: usize, w: usize, scales: usize) -> Result<()> {
    let stride = 1usize << (scales - 1);
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is not divisible by the total pyramid stride {stride}"
        )));
    }
    Ok(())
}

pub fn forward(params: &PyramidParams, images: &[Tensor]) -> Result<(FeaturePyramid, PyramidCache)> {
    let mut maps = Vec::with_capacity(images.len());
    let mut pre = Vec::with_capacity(images.len());
    for img in images {
        if img.rank() != 3 || img.shape()[2] != IMAGE_CHANNELS {
            return Err(Error::dim(format!("expected an HxWx3 image, got {:?}", img.shape())));
        }
        check_extent(img.shape()[0], img.shape()[1], params.scales())?;
        let mut view_maps = Vec::with_capacity(params.scales());
        let mut x = img.clone();
        for (l, c) in params.convs.iter().enumerate() {
            if l > 0 {
                x.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            }
            let y = conv2d(&x, &c.weight, Some(&c.bias), spec(l))?;
            view_maps.push(y.clone());
            x = y;
        }
        pre.push(view_maps.clone());
        maps.push(view_maps);
    }
    Ok((FeaturePyramid::new(maps)?, PyramidCache { pre }))
}

/// Accumulates parameter gradients from the pyramid gradient.
pub fn backward(
    params: &PyramidParams,
    images: &[Tensor],
    cache: &PyramidCache,
    d_pyramid: &FeaturePyramid,
    grads: &mut PyramidParams,
) -> Result<()> {
    for (t, img) in images.iter().enumerate() {
        let mut g: Option<Tensor> = None;
        for l in (0..params.scales()).rev() {
            let mut dy = d_pyramid.map(t, l).clone();
            if let Some(up) = g.take() {
                dy.add_assign(&up);
            }
            let input = if l == 0 {
                img.clone()
            } else {
                let mut a = cache.pre[t][l - 1].clone();
                a.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
                a
            };
            let c = &params.convs[l];
            let gc = &mut grads.convs[l];
            let dx = conv2d_backward(&input, &c.weight, spec(l), &dy, &mut gc.weight, Some(&mut gc.bias))?;
            if l > 0 {
                let mut dx = dx;
                for (d, z) in dx.data_mut().iter_mut().zip(cache.pre[t][l - 1].data()) {
                    *d *= gelu_grad(*z);
                }
                g = Some(dx);
            }
        }
    }
    Ok(())
}

/// Builds the pyramid for a set of views.
pub fn toy_feature_pyramid(images: &[Tensor], params: &PyramidParams) -> Result<FeaturePyramid> {
    forward(params, images).map(|(p, _)| p)
}

/// Reads `feat_v{t}_s{l}.egt` for every view and scale (both counted from 0).
pub fn load_pyramid(dir: impl AsRef<Path>, views: usize, scales: usize) -> Result<FeaturePyramid> {
    let dir = dir.as_ref();
    let maps = (0..views)
        .map(|t| (0..scales).map(|l| Tensor::load(dir.join(format!("feat_v{t}_s{l}.egt")))).collect())
        .collect::<Result<Vec<Vec<Tensor>>>>()?;
    FeaturePyramid::new(maps)
}

pub fn save_pyramid(pyramid: &FeaturePyramid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for t in 0..pyramid.n_views() {
        for l in 0..pyramid.n_scales() {
            pyramid.map(t, l).save(dir.join(format!("feat_v{t}_s{l}.egt")))?;
        }
    }
    Ok(())
}
