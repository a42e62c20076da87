//! The back tracing decoder: eye embeddings are refined by `L` pre-norm
//! layers of deformable self-attention, polar attention, multi-view
//! cross-attention and a convolutional FFN.

pub mod pyramid;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    deformable, ffn, mvaa, polar, positional_encoding, DeformableParams, EyeViews, FeaturePyramid, FfnParams,
    MvaaConfig, MvaaParams, PolarParams,
};
use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::eyes::EyeGrid;
use crate::impl_params;
use crate::numerics::ops::{layer_norm, layer_norm_backward};
use crate::numerics::{BackwardChain, Tensor};
use crate::params::{LayerNormParams, Params};

pub use pyramid::{load_pyramid, save_pyramid, toy_feature_pyramid, PyramidParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Sampling points per (head, scale, view) in the cross-attention.
    pub points: usize,
    pub scales: usize,
    pub pyramid_channels: usize,
    pub ffn_hidden: usize,
    /// Sampling points per head in the eye-map self-attention.
    pub self_points: usize,
    pub offset_scale: f64,
    pub positional_encoding: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            dim: 32,
            heads: 2,
            points: 2,
            scales: 2,
            pyramid_channels: 16,
            ffn_hidden: 64,
            self_points: 2,
            offset_scale: 0.03,
            positional_encoding: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.points == 0 || self.self_points == 0 || self.scales == 0 {
            return Err(Error::config("point and scale counts must be at least 1"));
        }
        if self.pyramid_channels == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(self.offset_scale.is_finite() && self.offset_scale >= 0.0) {
            return Err(Error::config("offset_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn mvaa(&self, views: usize) -> MvaaConfig {
        MvaaConfig {
            dim: self.dim,
            value_dim: self.pyramid_channels,
            heads: self.heads,
            points: self.points,
            scales: self.scales,
            views,
            offset_scale: self.offset_scale,
        }
    }
}

/// Per-view images (`H x W x 3`, values in `[0, 1]`) with their rig.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput {
    pub rig: CameraRig,
    pub images: Vec<Tensor>,
}

impl SceneInput {
    pub fn new(rig: CameraRig, images: Vec<Tensor>) -> Result<Self> {
        if images.len() != rig.n_views() {
            return Err(Error::dim(format!("{} images for {} cameras", images.len(), rig.n_views())));
        }
        let want = [rig.image_height, rig.image_width, 3];
        for (t, img) in images.iter().enumerate() {
            if img.shape() != want {
                return Err(Error::dim(format!("image {t} is {:?}, rig expects {want:?}", img.shape())));
            }
        }
        Ok(SceneInput { rig, images })
    }

    /// Reorders cameras and images together.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let rig = self.rig.permuted(order)?;
        let images = order.iter().map(|&t| self.images[t].clone()).collect();
        SceneInput::new(rig, images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub norm_self: LayerNormParams,
    pub deform: DeformableParams,
    pub norm_polar: LayerNormParams,
    pub polar: PolarParams,
    pub norm_cross: LayerNormParams,
    pub mvaa: MvaaParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

impl_params!(LayerParams {} nested { norm_self, deform, norm_polar, polar, norm_cross, mvaa, norm_ffn, ffn });

impl LayerParams {
    pub fn new<R: Rng + ?Sized>(config: &DecoderConfig, views: usize, rng: &mut R) -> Result<Self> {
        let c = config.dim;
        Ok(LayerParams {
            norm_self: LayerNormParams::new(c),
            deform: DeformableParams::new(c, config.heads, config.self_points, rng)?,
            norm_polar: LayerNormParams::new(c),
            polar: PolarParams::new(c, config.heads, rng)?,
            norm_cross: LayerNormParams::new(c),
            mvaa: MvaaParams::new(config.mvaa(views), rng)?,
            norm_ffn: LayerNormParams::new(c),
            ffn: FfnParams::new(c, config.ffn_hidden, rng)?,
        })
    }

    /// Zeroes every output projection and bias so the layer is the identity.
    pub fn zero_updates(&mut self) {
        self.deform.out.fill(0.0);
        self.deform.out_bias.fill(0.0);
        self.polar.wo.fill(0.0);
        self.polar.bo.fill(0.0);
        self.mvaa.output_proj.fill(0.0);
        self.ffn.contract.fill(0.0);
        self.ffn.contract_bias.fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub pyramid: PyramidParams,
    /// Shared initial embedding broadcast to every eye.
    pub eye_init: Tensor,
    pub layers: Vec<LayerParams>,
}

impl_params!(DecoderParams { eye_init } nested { pyramid, layers });

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(config: DecoderConfig, views: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if views == 0 {
            return Err(Error::config("decoder needs at least one view"));
        }
        let pyramid = PyramidParams::new(config.scales, config.pyramid_channels, rng)?;
        let eye_init = Tensor::uniform(&[config.dim], 1.0, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams::new(&config, views, rng))
            .collect::<Result<_>>()?;
        Ok(DecoderParams { config, pyramid, eye_init, layers })
    }

    pub fn views(&self) -> usize {
        self.layers[0].mvaa.config.views
    }

    /// The same model with its per-view cross-attention slots reordered to
    /// follow a camera permutation (see [`CameraRig::permuted`]).
    pub fn permuted_views(&self, order: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.mvaa = layer.mvaa.permuted_views(order)?;
        }
        Ok(out)
    }
}

/// Gradient accumulators for one backward pass.
pub struct DecoderGrads {
    pub params: DecoderParams,
    pub pyramid: FeaturePyramid,
}

type Chain<'a> = BackwardChain<'a, DecoderGrads, Tensor>;

fn norm_backward(x: &Tensor, inv_std: &[f64], p: &LayerNormParams, g: &Tensor, grads: &mut LayerNormParams) -> Tensor {
    layer_norm_backward(x, inv_std, p.gamma.data(), g, grads.gamma.data_mut(), grads.beta.data_mut())
}

/// Everything a decoder layer reads besides the embeddings.
pub struct LayerContext<'a> {
    pub grid: &'a EyeGrid,
    pub pyramid: &'a FeaturePyramid,
    pub views: &'a EyeViews,
}

fn layer_forward<'a>(
    index: usize,
    p: &'a LayerParams,
    ctx: &'a LayerContext<'a>,
    x: Tensor,
    chain: Option<&mut Chain<'a>>,
) -> Result<Tensor> {
    let grid = ctx.grid;
    let (n_self, inv_self) = layer_norm(&x, p.norm_self.gamma.data(), p.norm_self.beta.data());
    let (u_self, c_self) = deformable::forward(&p.deform, grid, &n_self)?;
    let mut x1 = x.clone();
    x1.add_assign(&u_self);

    let (n_polar, inv_polar) = layer_norm(&x1, p.norm_polar.gamma.data(), p.norm_polar.beta.data());
    let (u_polar, c_polar) = polar::forward(&p.polar, grid, &n_polar)?;
    let mut x2 = x1.clone();
    x2.add_assign(&u_polar);

    let (n_cross, inv_cross) = layer_norm(&x2, p.norm_cross.gamma.data(), p.norm_cross.beta.data());
    let (u_cross, c_cross) = mvaa::forward(&p.mvaa, &n_cross, ctx.pyramid, ctx.views)?;
    let mut x3 = x2.clone();
    x3.add_assign(&u_cross);

    let (n_ffn, inv_ffn) = layer_norm(&x3, p.norm_ffn.gamma.data(), p.norm_ffn.beta.data());
    let (u_ffn, c_ffn) = ffn::forward(&p.ffn, grid, &n_ffn)?;
    let mut out = x3.clone();
    out.add_assign(&u_ffn);
    out.ensure_finite("decoder layer output")?;

    if let Some(chain) = chain {
        chain.push(move |mut g: Tensor, gr: &mut DecoderGrads| {
            let gl = &mut gr.params.layers[index];
            let d = ffn::backward(&p.ffn, grid, &n_ffn, &c_ffn, &g, &mut gl.ffn)?;
            g.add_assign(&norm_backward(&x3, &inv_ffn, &p.norm_ffn, &d, &mut gl.norm_ffn));

            let (d, d_pyr) = mvaa::backward(&p.mvaa, &n_cross, ctx.pyramid, &c_cross, &g, &mut gl.mvaa)?;
            g.add_assign(&norm_backward(&x2, &inv_cross, &p.norm_cross, &d, &mut gl.norm_cross));
            for t in 0..d_pyr.n_views() {
                for l in 0..d_pyr.n_scales() {
                    gr.pyramid.map_mut(t, l).add_assign(d_pyr.map(t, l));
                }
            }

            let d = polar::backward(&p.polar, grid, &n_polar, &c_polar, &g, &mut gl.polar)?;
            g.add_assign(&norm_backward(&x1, &inv_polar, &p.norm_polar, &d, &mut gl.norm_polar));

            let d = deformable::backward(&p.deform, grid, &n_self, &c_self, &g, &mut gl.deform)?;
            g.add_assign(&norm_backward(&x, &inv_self, &p.norm_self, &d, &mut gl.norm_self));
            Ok(g)
        });
    }
    Ok(out)
}

/// One decoder layer; eye positions are untouched.
pub fn decoder_layer(x: &Tensor, ctx: &LayerContext<'_>, params: &LayerParams) -> Result<Tensor> {
    layer_forward(0, params, ctx, x.clone(), None)
}

/// Initial embeddings: the shared vector, plus the positional encoding when
/// enabled.
pub fn initial_embeddings(params: &DecoderParams, grid: &EyeGrid) -> Tensor {
    let c = params.config.dim;
    let mut x = Tensor::zeros(&[grid.len(), c]);
    for q in 0..grid.len() {
        x.row_mut(q).copy_from_slice(params.eye_init.data());
    }
    if params.config.positional_encoding {
        x.add_assign(&positional_encoding(grid.positions(), c, 2.0 * grid.r_max()));
    }
    x
}

fn check_views(params: &DecoderParams, rig: &CameraRig) -> Result<()> {
    if rig.n_views() != params.views() {
        return Err(Error::config(format!(
            "decoder was built for {} views, rig has {}",
            params.views(),
            rig.n_views()
        )));
    }
    Ok(())
}

/// Runs all layers over a ready-made pyramid (e.g. loaded from files).
pub fn decode(pyramid: &FeaturePyramid, rig: &CameraRig, grid: &EyeGrid, params: &DecoderParams) -> Result<Tensor> {
    check_views(params, rig)?;
    let views = EyeViews::compute(rig, grid.positions());
    let ctx = LayerContext { grid, pyramid, views: &views };
    let mut x = initial_embeddings(params, grid);
    for (i, layer) in params.layers.iter().enumerate() {
        x = layer_forward(i, layer, &ctx, x, None)?;
    }
    Ok(x)
}

/// Image-to-eye forward pass: `N_eyes x C` final eye features.
pub fn ego3rt_forward(scene: &SceneInput, grid: &EyeGrid, params: &DecoderParams) -> Result<Tensor> {
    let pyramid = toy_feature_pyramid(&scene.images, &params.pyramid)?;
    decode(&pyramid, &scene.rig, grid, params)
}

/// Precomputed per-scene inputs shared by forward passes.
pub struct Prepared {
    pub pyramid: FeaturePyramid,
    pyramid_cache: pyramid::PyramidCache,
    pub views: EyeViews,
}

/// A forward pass whose backward can be replayed.
pub struct Tape<'a> {
    params: &'a DecoderParams,
    scene: &'a SceneInput,
    prepared: &'a Prepared,
    chain: Chain<'a>,
}

/// Builds the pyramid and visibility for a scene.
pub fn prepare(scene: &SceneInput, grid: &EyeGrid, params: &DecoderParams) -> Result<Prepared> {
    check_views(params, &scene.rig)?;
    let (pyramid, pyramid_cache) = pyramid::forward(&params.pyramid, &scene.images)?;
    Ok(Prepared { pyramid, pyramid_cache, views: EyeViews::compute(&scene.rig, grid.positions()) })
}

/// Forward pass recording the backward.
pub fn forward_tape<'a>(
    scene: &'a SceneInput,
    grid: &'a EyeGrid,
    params: &'a DecoderParams,
    prepared: &'a Prepared,
    ctx: &'a LayerContext<'a>,
) -> Result<(Tensor, Tape<'a>)> {
    let mut chain = Chain::new();
    chain.push(|g: Tensor, gr: &mut DecoderGrads| {
        let init = gr.params.eye_init.data_mut();
        for q in 0..g.shape()[0] {
            for (a, b) in init.iter_mut().zip(g.row(q)) {
                *a += b;
            }
        }
        Ok(g)
    });
    let mut x = initial_embeddings(params, grid);
    for (i, layer) in params.layers.iter().enumerate() {
        x = layer_forward(i, layer, ctx, x, Some(&mut chain))?;
    }
    Ok((x, Tape { params, scene, prepared, chain }))
}

impl Tape<'_> {
    /// Accumulates parameter gradients for `d loss / d eye features` into
    /// `grads`.
    pub fn backward(self, grad_out: Tensor, grads: &mut DecoderParams) -> Result<()> {
        let mut acc = DecoderGrads {
            params: std::mem::replace(grads, self.params.zeros_like()),
            pyramid: self.prepared.pyramid.zeros_like(),
        };
        self.chain.run(grad_out, &mut acc)?;
        pyramid::backward(
            &self.params.pyramid,
            &self.scene.images,
            &self.prepared.pyramid_cache,
            &acc.pyramid,
            &mut acc.params.pyramid,
        )?;
        *grads = acc.params;
        Ok(())
    }
}

impl<'a> LayerContext<'a> {
    pub fn new(grid: &'a EyeGrid, prepared: &'a Prepared) -> Self {
        LayerContext { grid, pyramid: &prepared.pyramid, views: &prepared.views }
    }
}
