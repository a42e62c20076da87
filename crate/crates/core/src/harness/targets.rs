//! Training targets from scene ground truth.

use crate::boxes::{draw_gaussian, Box3d, BoxTarget};
use crate::error::{Error, Result};
use crate::eyes::BevGrid;
use crate::losses::{LossConfig, Targets};
use crate::numerics::Tensor;

/// Heatmaps with a Gaussian of `radius` cells at each box center, encoded
/// regression targets, and the segmentation rasters with their valid mask.
/// Boxes whose center leaves the grid are dropped.
pub fn build_targets(
    boxes: &[Box3d],
    rasters: &[Tensor],
    bev: BevGrid,
    seg_mask: &[bool],
    cfg: &LossConfig,
    radius: usize,
) -> Result<Targets> {
    let groups = cfg.group_list();
    let slots = cfg.class_slots();
    let cells = bev.side * bev.side;
    let mut heat: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; cells * g.len()]).collect();
    let mut objects = Vec::with_capacity(boxes.len());
    for b in boxes {
        let &(g, k) = slots
            .get(b.class)
            .ok_or_else(|| Error::Domain(format!("box class {} has no detection group", b.class)))?;
        if let Some(t) = BoxTarget::encode(b, bev, g) {
            draw_gaussian(&mut heat[g], bev.side, groups[g].len(), k, t.row, t.col, radius);
            objects.push(t);
        }
    }
    let heatmaps = heat
        .into_iter()
        .zip(&groups)
        .map(|(h, g)| Tensor::from_vec(&[cells, g.len()], h))
        .collect::<Result<Vec<_>>>()?;
    Ok(Targets { heatmaps, objects, seg: rasters.to_vec(), seg_mask: seg_mask.to_vec() })
}
