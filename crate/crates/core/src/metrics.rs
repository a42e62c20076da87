//! Center-distance mAP, true-positive errors, NDS, and raster IoU.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::Serialize;

use crate::boxes::{Box3d, Detection};
use crate::numerics::ops::sigmoid;

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

/// One prediction's outcome at a threshold, in confidence order.
#[derive(Clone, Copy, Debug)]
struct Match {
    tp: bool,
    gt: Option<(usize, usize)>,
    pred: (usize, usize),
}

fn dist_xy(a: &Box3d, b: &Box3d) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Greedy matching of `class` predictions across all scenes, highest score
/// first (ties keep input order), to the nearest unmatched ground truth of
/// the same scene strictly closer than `threshold`.
fn match_class(preds: &[Vec<Detection>], gts: &[Vec<Box3d>], class: usize, threshold: f64) -> Vec<Match> {
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ps)| ps.iter().enumerate().filter(|(_, p)| p.bbox.class == class).map(move |(i, _)| (s, i)))
        .collect();
    order.sort_by(|a, b| preds[b.0][b.1].score.partial_cmp(&preds[a.0][a.1].score).unwrap_or(Ordering::Equal));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|(s, i)| {
            let p = &preds[s][i].bbox;
            let best = gts
                .get(s)
                .into_iter()
                .flatten()
                .enumerate()
                .filter(|(j, g)| g.class == class && !taken[s][*j])
                .map(|(j, g)| (j, dist_xy(p, g)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal));
            match best {
                Some((j, d)) if d < threshold => {
                    taken[s][j] = true;
                    Match { tp: true, gt: Some((s, j)), pred: (s, i) }
                }
                _ => Match { tp: false, gt: None, pred: (s, i) },
            }
        })
        .collect()
}

/// Linear interpolation with `numpy.interp` semantics: left of the first
/// sample gives the first value, right of the last gives `right`.
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let last = xp.len() - 1;
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[last] {
        return right;
    }
    if x == xp[last] {
        return fp[last];
    }
    let k = xp.partition_point(|&v| v <= x);
    let (x0, x1) = (xp[k - 1], xp[k]);
    if x1 == x0 {
        return fp[k - 1];
    }
    fp[k - 1] + (fp[k] - fp[k - 1]) * (x - x0) / (x1 - x0)
}

/// Average precision from confidence-ordered match flags: precision is
/// interpolated at 101 recall points, the region below recall 0.1 and
/// precision 0.1 is removed, and the result is renormalized to [0, 1].
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rec = Vec::with_capacity(tp_flags.len());
    let mut prec = Vec::with_capacity(tp_flags.len());
    for &f in tp_flags {
        if f {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rec.push(tp / n_gt as f64);
        prec.push(tp / (tp + fp));
    }
    let first = (MIN_RECALL * (RECALL_POINTS - 1) as f64).round() as usize + 1;
    let vals: Vec<f64> = (first..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            (interp(r, &rec, &prec, 0.0) - MIN_PRECISION).max(0.0)
        })
        .collect();
    (vals.iter().sum::<f64>() / vals.len() as f64 / (1.0 - MIN_PRECISION)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapResult {
    pub map: f64,
    /// AP per threshold, averaged over classes with ground truth.
    pub per_threshold: Vec<f64>,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean AP over thresholds and over classes that have ground truth. With no
/// ground truth at all the result is 0.
pub fn compute_map(preds: &[Vec<Detection>], gts: &[Vec<Box3d>], classes: usize, thresholds: &[f64]) -> MapResult {
    let mut per_threshold = vec![0.0; thresholds.len()];
    let mut per_class = vec![None; classes];
    let mut counted = 0;
    for (c, slot) in per_class.iter_mut().enumerate() {
        let n_gt = gts.iter().flatten().filter(|g| g.class == c).count();
        if n_gt == 0 {
            continue;
        }
        counted += 1;
        let mut sum = 0.0;
        for (t, &th) in thresholds.iter().enumerate() {
            let flags: Vec<bool> = match_class(preds, gts, c, th).iter().map(|m| m.tp).collect();
            let ap = average_precision(&flags, n_gt);
            per_threshold[t] += ap;
            sum += ap;
        }
        *slot = Some(sum / thresholds.len() as f64);
    }
    if counted == 0 {
        return MapResult { map: 0.0, per_threshold, per_class };
    }
    per_threshold.iter_mut().for_each(|v| *v /= counted as f64);
    let map = per_threshold.iter().sum::<f64>() / thresholds.len().max(1) as f64;
    MapResult { map, per_threshold, per_class }
}

/// Mean true-positive errors `[ATE, ASE, AOE, AVE, AAE]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// IoU of two boxes after aligning centers and headings.
pub fn aligned_iou(a: &Box3d, b: &Box3d) -> f64 {
    let inter = a.l.min(b.l) * a.w.min(b.w) * a.h.min(b.h);
    inter / (a.l * a.w * a.h + b.l * b.w * b.h - inter)
}

/// Absolute yaw difference wrapped to `[0, π]`.
pub fn yaw_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Per-class means over matches at [`TP_THRESHOLD`], then averaged over
/// classes with ground truth. A class without matches scores 1 on every
/// error. Attributes are not predicted, so AAE is 0.
pub fn compute_tp_errors(preds: &[Vec<Detection>], gts: &[Vec<Box3d>], classes: usize) -> TpErrors {
    let mut acc = [0.0; 4];
    let mut counted = 0;
    for c in 0..classes {
        if !gts.iter().flatten().any(|g| g.class == c) {
            continue;
        }
        counted += 1;
        let matches: Vec<Match> = match_class(preds, gts, c, TP_THRESHOLD).into_iter().filter(|m| m.tp).collect();
        if matches.is_empty() {
            acc.iter_mut().for_each(|a| *a += 1.0);
            continue;
        }
        let mut sums = [0.0; 4];
        for m in &matches {
            let (s, j) = m.gt.expect("matched");
            let g = &gts[s][j];
            let p = &preds[m.pred.0][m.pred.1].bbox;
            sums[0] += dist_xy(p, g);
            sums[1] += 1.0 - aligned_iou(p, g);
            sums[2] += yaw_diff(p.yaw, g.yaw);
            sums[3] += (p.vx - g.vx).hypot(p.vy - g.vy);
        }
        for (a, s) in acc.iter_mut().zip(sums) {
            *a += s / matches.len() as f64;
        }
    }
    if counted == 0 {
        return TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, aae: 0.0 };
    }
    let n = counted as f64;
    TpErrors { ate: acc[0] / n, ase: acc[1] / n, aoe: acc[2] / n, ave: acc[3] / n, aae: 0.0 }
}

/// `(5·mAP + Σ (1 − min(1, tp))) / 10`
pub fn compute_nds(map: f64, tp: &[f64; 5]) -> f64 {
    (5.0 * map + tp.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

/// IoU of `sigmoid(logit) >= threshold` against `truth` over valid cells;
/// 1 when the union is empty.
pub fn compute_iou(logits: &[f64], truth: &[bool], valid: &[bool], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&z, &t), &v) in logits.iter().zip(truth).zip(valid) {
        if !v {
            continue;
        }
        let p = sigmoid(z) >= threshold;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub map: f64,
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub tp: TpErrors,
    pub nds: f64,
    pub iou: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn build(preds: &[Vec<Detection>], gts: &[Vec<Box3d>], classes: usize, iou: Vec<(String, f64)>) -> Self {
        let m = compute_map(preds, gts, classes, &DIST_THRESHOLDS);
        let tp = compute_tp_errors(preds, gts, classes);
        MetricsReport {
            map: m.map,
            ap_per_threshold: DIST_THRESHOLDS.iter().copied().zip(m.per_threshold).collect(),
            nds: compute_nds(m.map, &tp.as_array()),
            tp,
            iou,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mAP   {:.4}", self.map);
        for (th, ap) in &self.ap_per_threshold {
            let _ = writeln!(s, "  AP@{th}m {ap:.4}");
        }
        let t = &self.tp;
        let _ = writeln!(s, "mATE  {:.4}\nmASE  {:.4}\nmAOE  {:.4}\nmAVE  {:.4}\nmAAE  {:.4}", t.ate, t.ase, t.aoe, t.ave, t.aae);
        let _ = writeln!(s, "NDS   {:.4}", self.nds);
        for (name, v) in &self.iou {
            let _ = writeln!(s, "IoU[{name}] {v:.4}");
        }
        s
    }

    /// `key=value` lines with full precision.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("map={}\n", self.map);
        for (th, ap) in &self.ap_per_threshold {
            let _ = writeln!(s, "ap_{th}={ap}");
        }
        let t = &self.tp;
        let _ = writeln!(s, "mate={}\nmase={}\nmaoe={}\nmave={}\nmaae={}\nnds={}", t.ate, t.ase, t.aoe, t.ave, t.aae, self.nds);
        for (name, v) in &self.iou {
            let _ = writeln!(s, "iou_{name}={v}");
        }
        s
    }
}
