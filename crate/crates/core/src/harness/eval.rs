//! Peak decoding and metric computation over a scene set.

use rayon::prelude::*;

use crate::boxes::{decode_box, Box3d, Detection};
use crate::error::Result;
use crate::eyes::BevGrid;
use crate::harness::config::RunConfig;
use crate::harness::model::{infer, Model, Outputs, Pipeline};
use crate::harness::scene::SyntheticScene;
use crate::harness::train::pool;
use crate::heads::DetOutput;
use crate::metrics::{compute_iou, MetricsReport};
use crate::numerics::Tensor;

/// Boxes at 3x3 local maxima of each class heatmap with score at least
/// `threshold`, strongest first.
pub fn decode_detections(det: &DetOutput, groups: &[Vec<usize>], bev: BevGrid, threshold: f64) -> Vec<Detection> {
    let side = det.side;
    let mut out = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let heat = det.heatmap(g);
        let n = members.len();
        let at = |r: usize, c: usize, k: usize| heat.data()[(r * side + c) * n + k];
        for (k, &class) in members.iter().enumerate() {
            for r in 0..side {
                for c in 0..side {
                    let p = at(r, c, k);
                    if p < threshold {
                        continue;
                    }
                    let mut peak = true;
                    'nb: for rr in r.saturating_sub(1)..=(r + 1).min(side - 1) {
                        for cc in c.saturating_sub(1)..=(c + 1).min(side - 1) {
                            let q = at(rr, cc, k);
                            // ties go to the first cell in scan order
                            if q > p || (q == p && (rr, cc) < (r, c)) {
                                peak = false;
                                break 'nb;
                            }
                        }
                    }
                    if peak {
                        let bbox = decode_box(det.regression(g, r * side + c), r, c, class, bev);
                        out.push(Detection { bbox, score: p });
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Distance from each ground-truth center to the nearest same-class
/// prediction; infinite when there is none.
pub fn center_errors(preds: &[Detection], gts: &[Box3d]) -> Vec<f64> {
    gts.iter()
        .map(|g| {
            preds
                .iter()
                .filter(|p| p.bbox.class == g.class)
                .map(|p| (p.bbox.x - g.x).hypot(p.bbox.y - g.y))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Vec<Detection>>,
    /// Per scene, per ground-truth box.
    pub center_errors: Vec<Vec<f64>>,
}

impl Evaluation {
    pub fn max_center_error(&self) -> f64 {
        self.center_errors.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Metrics from per-scene head outputs. IoU pools all cells of all scenes.
pub fn evaluate_outputs(
    dets: &[DetOutput],
    segs: &[Vec<Tensor>],
    scenes: &[SyntheticScene],
    pipe: &Pipeline,
    cfg: &RunConfig,
) -> Evaluation {
    let groups = cfg.loss.group_list();
    let predictions: Vec<Vec<Detection>> =
        dets.iter().map(|d| decode_detections(d, &groups, pipe.bev, cfg.eval.score_threshold)).collect();
    let gts: Vec<Vec<Box3d>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let mut iou = Vec::with_capacity(cfg.loss.elements.len());
    for (e, name) in cfg.loss.elements.iter().enumerate() {
        let (mut logits, mut truth, mut valid) = (Vec::new(), Vec::new(), Vec::new());
        for (seg, scene) in segs.iter().zip(scenes) {
            logits.extend_from_slice(seg[e].data());
            truth.extend(scene.rasters[e].data().iter().map(|&v| v >= 0.5));
            valid.extend_from_slice(&pipe.seg_mask);
        }
        iou.push((name.clone(), compute_iou(&logits, &truth, &valid, cfg.eval.iou_threshold)));
    }
    let report = MetricsReport::build(&predictions, &gts, cfg.loss.classes.len(), iou);
    let center_errors = predictions.iter().zip(&gts).map(|(p, g)| center_errors(p, g)).collect();
    Evaluation { report, predictions, center_errors }
}

pub fn run_model(model: &Model, pipe: &Pipeline, scenes: &[SyntheticScene]) -> Result<Vec<Outputs>> {
    pool()?.install(|| scenes.par_iter().map(|s| infer(model, pipe, &s.input()?)).collect())
}

pub fn evaluate(model: &Model, scenes: &[SyntheticScene], cfg: &RunConfig) -> Result<Evaluation> {
    let pipe = Pipeline::new(cfg)?;
    let outs = run_model(model, &pipe, scenes)?;
    let dets: Vec<DetOutput> = outs.iter().map(|o| o.det.clone()).collect();
    let segs: Vec<Vec<Tensor>> = outs.into_iter().map(|o| o.seg).collect();
    Ok(evaluate_outputs(&dets, &segs, scenes, &pipe, cfg))
}
