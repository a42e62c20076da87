//! The full network: decoder, polar-to-BEV resampling, BEV encoder and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderParams, LayerContext, SceneInput};
use crate::error::Result;
use crate::eyes::{BevGrid, BevSampler, EyeGrid};
use crate::harness::augment::Warp;
use crate::harness::config::RunConfig;
use crate::heads::{detection, encoder, segmentation, DetOutput, DetectionParams, EncoderParams, SegmentationParams};
use crate::impl_params;
use crate::losses::{total_loss, LossBreakdown, Targets};
use crate::numerics::Tensor;
use crate::params::Params;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
    pub detection: DetectionParams,
    pub segmentation: SegmentationParams,
}

impl_params!(Model {} nested { decoder, encoder, detection, segmentation });

impl Model {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dim = cfg.decoder.dim;
        let group_sizes: Vec<usize> = cfg.loss.group_list().iter().map(Vec::len).collect();
        Ok(Model {
            decoder: DecoderParams::new(cfg.decoder.clone(), cfg.scene.views, &mut rng)?,
            encoder: EncoderParams::new(dim, cfg.heads.encoder_blocks, &mut rng)?,
            detection: DetectionParams::new(dim, &group_sizes, &mut rng)?,
            segmentation: SegmentationParams::new(
                dim,
                cfg.heads.seg_hidden,
                cfg.loss.elements.len(),
                cfg.heads.seg_ratio,
                &mut rng,
            )?,
        })
    }
}

/// Grids and resampling plans fixed by the configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub eyes: EyeGrid,
    pub bev: BevGrid,
    pub sampler: BevSampler,
    pub bev_mask: Vec<bool>,
    pub seg_grid: BevGrid,
    pub seg_mask: Vec<bool>,
}

impl Pipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let eyes = cfg.grid.eye_grid()?;
        let bev = cfg.grid.bev()?;
        let sampler = BevSampler::new(&eyes, bev);
        let bev_mask = sampler.mask();
        let seg_grid = bev.refined(cfg.heads.seg_ratio);
        let seg_mask = seg_grid.validity(&eyes);
        Ok(Pipeline { eyes, bev, sampler, bev_mask, seg_grid, seg_mask })
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs {
    /// `N_eyes x C` final eye embeddings.
    pub eye_features: Tensor,
    /// `side x side x C` resampled BEV map, before the encoder.
    pub bev_features: Tensor,
    pub det: DetOutput,
    /// Per element, `side_r x side_r` logits.
    pub seg: Vec<Tensor>,
}

pub fn infer(model: &Model, pipe: &Pipeline, scene: &SceneInput) -> Result<Outputs> {
    let eye_features = decoder::ego3rt_forward(scene, &pipe.eyes, &model.decoder)?;
    let bev_features = pipe.sampler.forward(&eye_features)?;
    let (encoded, _) = encoder::forward(&model.encoder, &bev_features, &pipe.bev_mask)?;
    let (det, _) = detection::forward(&model.detection, &encoded)?;
    let (seg, _) = segmentation::forward(&model.segmentation, &encoded)?;
    Ok(Outputs { eye_features, bev_features, det, seg })
}

/// Loss and parameter gradients for one scene. With `warp`, the BEV map is
/// resampled before the encoder and the targets must already be warped.
pub fn loss_and_grads(
    model: &Model,
    pipe: &Pipeline,
    scene: &SceneInput,
    targets: &Targets,
    warp: Option<&Warp>,
    cfg: &RunConfig,
) -> Result<(LossBreakdown, Model)> {
    let prepared = decoder::prepare(scene, &pipe.eyes, &model.decoder)?;
    let ctx = LayerContext::new(&pipe.eyes, &prepared);
    let (eye_features, tape) = decoder::forward_tape(scene, &pipe.eyes, &model.decoder, &prepared, &ctx)?;
    let mut bev = pipe.sampler.forward(&eye_features)?;
    let mut mask = pipe.bev_mask.clone();
    if let Some(w) = warp {
        bev = w.forward(&bev)?;
        mask = w.warp_mask(&mask);
    }
    let (encoded, enc_cache) = encoder::forward(&model.encoder, &bev, &mask)?;
    let (det, det_cache) = detection::forward(&model.detection, &encoded)?;
    let (seg, seg_cache) = segmentation::forward(&model.segmentation, &encoded)?;
    let (breakdown, g) = total_loss(&det, &seg, targets, &cfg.loss)?;

    let mut grads = model.zeros_like();
    let mut d_enc = detection::backward(&model.detection, &det_cache, &g.det, &mut grads.detection)?;
    d_enc.add_assign(&segmentation::backward(&model.segmentation, &seg_cache, &g.seg, &mut grads.segmentation)?);
    let mut d_bev = encoder::backward(&model.encoder, &enc_cache, &d_enc, &mut grads.encoder)?;
    if let Some(w) = warp {
        d_bev = w.backward(&d_bev);
    }
    let d_eyes = pipe.sampler.backward(&d_bev);
    tape.backward(d_eyes, &mut grads.decoder)?;
    Ok((breakdown, grads))
}
