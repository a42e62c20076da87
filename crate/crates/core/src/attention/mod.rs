//! The back-tracing attention blocks: multi-view multi-scale adaptive
//! attention (MVAA), polar self-attention, deformable self-attention over the
//! eye map, and the depth-wise convolutional feed-forward block.
//!
//! Every block maps `N_eyes x C` embeddings to `N_eyes x C` updates and has an
//! explicit backward that accumulates into a gradient copy of its parameters.

pub mod deformable;
pub mod ffn;
pub mod mvaa;
pub mod polar;

use std::f64::consts::TAU;

use crate::camera::{visible, CameraRig, Vec3};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use deformable::{deformable_self_attention, DeformableParams};
pub use ffn::{ffn_dwconv, FfnParams};
pub use mvaa::{attention_weights, init_offset_bias, mvaa, sampling_offsets, MvaaConfig, MvaaParams};
pub use polar::{polar_attention, PolarParams};

/// Per view, per scale `H_l x W_l x C` feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    maps: Vec<Vec<Tensor>>,
}

impl FeaturePyramid {
    /// `maps[view][scale]`.
    pub fn new(maps: Vec<Vec<Tensor>>) -> Result<Self> {
        let n_scales = maps.first().map_or(0, Vec::len);
        if maps.is_empty() || n_scales == 0 {
            return Err(Error::config("feature pyramid needs at least one view and one scale"));
        }
        for (t, view) in maps.iter().enumerate() {
            if view.len() != n_scales {
                return Err(Error::config(format!("view {t} has {} scales, expected {n_scales}", view.len())));
            }
            for (l, m) in view.iter().enumerate() {
                if m.rank() != 3 || m.shape()[0] == 0 || m.shape()[1] == 0 {
                    return Err(Error::dim(format!("view {t} scale {l}: expected HxWxC, got {:?}", m.shape())));
                }
                if m.shape() != maps[0][l].shape() {
                    return Err(Error::dim(format!("view {t} scale {l} disagrees with view 0")));
                }
                if l > 0 {
                    let prev = view[l - 1].shape();
                    if !(m.shape()[0] < prev[0] && m.shape()[1] < prev[1]) {
                        return Err(Error::config(format!("scale {l} does not shrink relative to scale {}", l - 1)));
                    }
                }
            }
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn n_views(&self) -> usize {
        self.maps.len()
    }

    pub fn n_scales(&self) -> usize {
        self.maps[0].len()
    }

    pub fn map(&self, view: usize, scale: usize) -> &Tensor {
        &self.maps[view][scale]
    }

    pub fn map_mut(&mut self, view: usize, scale: usize) -> &mut Tensor {
        &mut self.maps[view][scale]
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.maps[0][scale].shape()[2]
    }

    pub fn zeros_like(&self) -> Self {
        FeaturePyramid {
            maps: self.maps.iter().map(|v| v.iter().map(Tensor::zeros_like).collect()).collect(),
        }
    }

    pub fn into_maps(self) -> Vec<Vec<Tensor>> {
        self.maps
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.maps
            .iter()
            .flatten()
            .zip(other.maps.iter().flatten())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Eye embeddings with their fixed ego positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeState {
    pub embeddings: Tensor,
    pub positions: Vec<Vec3>,
}

impl EyeState {
    pub fn new(embeddings: Tensor, positions: Vec<Vec3>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != positions.len() {
            return Err(Error::dim(format!(
                "{} positions but embeddings of shape {:?}",
                positions.len(),
                embeddings.shape()
            )));
        }
        embeddings.ensure_finite("eye embeddings")?;
        Ok(EyeState { embeddings, positions })
    }
}

/// Where each eye lands in each camera that sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeViews {
    /// `per_eye[q]` lists `(view, u, v)` for every visible view, by view index.
    pub per_eye: Vec<Vec<(usize, f64, f64)>>,
}

impl EyeViews {
    pub fn compute(rig: &CameraRig, positions: &[Vec3]) -> Self {
        let per_eye = positions
            .iter()
            .map(|&p| {
                rig.cameras()
                    .iter()
                    .filter_map(|cam| {
                        let ip = cam.project(p).ok()?;
                        visible(&ip).then_some((cam.view, ip.u, ip.v))
                    })
                    .collect()
            })
            .collect();
        EyeViews { per_eye }
    }

    pub fn visibility_sets(&self) -> Vec<Vec<usize>> {
        self.per_eye.iter().map(|v| v.iter().map(|e| e.0).collect()).collect()
    }

    pub fn blind_count(&self) -> usize {
        self.per_eye.iter().filter(|v| v.is_empty()).count()
    }
}

/// Optional sinusoidal encoding of eye ego positions, `N_eyes x C`.
pub fn positional_encoding(positions: &[Vec3], dim: usize, max_range: f64) -> Tensor {
    let mut out = Tensor::zeros(&[positions.len(), dim]);
    let bands = dim / 4;
    for (q, p) in positions.iter().enumerate() {
        let row = out.row_mut(q);
        for b in 0..bands {
            let freq = TAU / max_range * (1u64 << b.min(20)) as f64;
            row[4 * b] = (p[0] * freq).sin();
            row[4 * b + 1] = (p[0] * freq).cos();
            row[4 * b + 2] = (p[1] * freq).sin();
            row[4 * b + 3] = (p[1] * freq).cos();
        }
    }
    out
}
