//! Detection and segmentation losses with gradients w.r.t. raw head outputs.

use serde::{Deserialize, Serialize};

use crate::boxes::{BoxTarget, REG_CHANNELS};
use crate::error::{Error, Result};
use crate::heads::DetOutput;
use crate::numerics::ops::sigmoid;
use crate::numerics::Tensor;

pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_cls: f64,
    pub lambda_box: f64,
    /// One weight per segmentation element; empty means 1 for all.
    pub lambda_seg: Vec<f64>,
    pub classes: Vec<String>,
    /// Class indices per detection group; empty means one group per class.
    pub groups: Vec<Vec<usize>>,
    pub elements: Vec<String>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 2.0,
            beta: 4.0,
            lambda_cls: 1.0,
            lambda_box: 1.0,
            lambda_seg: Vec::new(),
            classes: vec!["car".into(), "van".into()],
            groups: Vec::new(),
            elements: vec!["drivable".into(), "divider".into()],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.lambda_cls, self.lambda_box];
        if weights.iter().chain(&self.lambda_seg).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights and focal exponents must be finite and nonnegative"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("at least one detection class is required"));
        }
        if !self.lambda_seg.is_empty() && self.lambda_seg.len() != self.elements.len() {
            return Err(Error::config(format!(
                "{} segmentation weights for {} elements",
                self.lambda_seg.len(),
                self.elements.len()
            )));
        }
        let mut seen = vec![false; self.classes.len()];
        for &c in self.group_list().iter().flatten() {
            if c >= seen.len() || std::mem::replace(&mut seen[c], true) {
                return Err(Error::config(format!("class {c} is out of range or grouped twice")));
            }
        }
        if seen.contains(&false) {
            return Err(Error::config("detection groups must cover every class"));
        }
        Ok(())
    }

    pub fn group_list(&self) -> Vec<Vec<usize>> {
        if self.groups.is_empty() {
            (0..self.classes.len()).map(|c| vec![c]).collect()
        } else {
            self.groups.clone()
        }
    }

    /// `(group, position within group)` of every class.
    pub fn class_slots(&self) -> Vec<(usize, usize)> {
        let mut slots = vec![(0, 0); self.classes.len()];
        for (g, members) in self.group_list().iter().enumerate() {
            for (k, &c) in members.iter().enumerate() {
                slots[c] = (g, k);
            }
        }
        slots
    }

    pub fn seg_weight(&self, t: usize) -> f64 {
        self.lambda_seg.get(t).copied().unwrap_or(1.0)
    }
}

/// Training targets for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Per group, `side^2 x classes_g`.
    pub heatmaps: Vec<Tensor>,
    pub objects: Vec<BoxTarget>,
    /// Per element, `side_r x side_r` with values 0 or 1.
    pub seg: Vec<Tensor>,
    /// Valid cells of the segmentation raster.
    pub seg_mask: Vec<bool>,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c == p)
}

fn focal_term(p: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let (p, live) = clamp_prob(p);
    let (value, d_p) = if y == 1.0 {
        let q = 1.0 - p;
        (-q.powf(alpha) * p.ln(), alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p)
    } else {
        let w = (1.0 - y).powf(beta);
        let pa = p.powf(alpha);
        let l1 = (1.0 - p).ln();
        let dpa = if alpha == 0.0 { 0.0 } else { alpha * p.powf(alpha - 1.0) };
        (-w * pa * l1, -w * (dpa * l1 - pa / (1.0 - p)))
    };
    (value, if live { d_p } else { 0.0 })
}

/// Focal loss on probabilities. `n` below 1 is treated as 1.
pub fn focal_loss(pred: &[f64], target: &[f64], alpha: f64, beta: f64, n: f64) -> f64 {
    let n = n.max(1.0);
    pred.iter().zip(target).map(|(&p, &y)| focal_term(p, y, alpha, beta).0).sum::<f64>() / n
}

/// Focal loss on logits, with the gradient w.r.t. each logit.
pub fn focal_loss_logits(logits: &[f64], target: &[f64], alpha: f64, beta: f64, n: f64) -> (f64, Vec<f64>) {
    let n = n.max(1.0);
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| {
            let p = sigmoid(z);
            let (v, d_p) = focal_term(p, y, alpha, beta);
            total += v;
            d_p * p * (1.0 - p) / n
        })
        .collect();
    (total / n, grad)
}

/// Sum of absolute residual differences, averaged over objects (0 if none),
/// with the gradient w.r.t. `pred`.
pub fn box_l1_loss(pred: &[[f64; REG_CHANNELS]], target: &[[f64; REG_CHANNELS]]) -> (f64, Vec<[f64; REG_CHANNELS]>) {
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let mut g = [0.0; REG_CHANNELS];
            for k in 0..REG_CHANNELS {
                let d = p[k] - t[k];
                total += d.abs();
                g[k] = d.signum() * (d != 0.0) as u8 as f64 / n;
            }
            g
        })
        .collect();
    (total / n, grad)
}

/// Pixel-wise binary cross-entropy on logits averaged over valid cells
/// (0 when none are valid), with its gradient.
pub fn bce_masked(logits: &[f64], target: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; logits.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let n = count as f64;
    let mut total = 0.0;
    for (i, (&z, &y)) in logits.iter().zip(target).enumerate() {
        if !mask[i] {
            continue;
        }
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - y) / n;
    }
    (total / n, grad)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: Vec<f64>,
    pub boxes: Vec<f64>,
    pub seg: Vec<f64>,
}

impl LossBreakdown {
    pub fn det(&self, cfg: &LossConfig) -> f64 {
        self.cls.iter().zip(&self.boxes).map(|(c, b)| cfg.lambda_cls * c + cfg.lambda_box * b).sum()
    }
}

pub struct LossGrads {
    pub det: DetOutput,
    pub seg: Vec<Tensor>,
}

/// Weighted detection plus segmentation loss. Components are unweighted;
/// `total` and the gradients carry the weights.
pub fn total_loss(
    det: &DetOutput,
    seg: &[Tensor],
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads)> {
    let n_groups = det.groups.len();
    if targets.heatmaps.len() != n_groups || seg.len() != targets.seg.len() {
        return Err(Error::dim("loss targets do not match head outputs"));
    }
    let mut out = LossBreakdown::default();
    let mut g_det = det.zeros_like();
    for g in 0..n_groups {
        let n_cls = det.classes(g);
        let cells = det.side * det.side;
        let heat = &targets.heatmaps[g];
        if heat.len() != cells * n_cls {
            return Err(Error::dim(format!("group {g} heatmap target has {} values", heat.len())));
        }
        let objects: Vec<&BoxTarget> = targets.objects.iter().filter(|o| o.group == g).collect();
        let logits: Vec<f64> = (0..cells).flat_map(|c| det.groups[g].row(c)[..n_cls].to_vec()).collect();
        let (cls, d_cls) = focal_loss_logits(&logits, heat.data(), cfg.alpha, cfg.beta, objects.len() as f64);
        let pred: Vec<[f64; REG_CHANNELS]> = objects
            .iter()
            .map(|o| det.regression(g, o.row * det.side + o.col).try_into().expect("regression width"))
            .collect();
        let want: Vec<[f64; REG_CHANNELS]> = objects.iter().map(|o| o.regression()).collect();
        let (bx, d_box) = box_l1_loss(&pred, &want);
        let gg = &mut g_det.groups[g];
        for c in 0..cells {
            for (k, d) in gg.row_mut(c)[..n_cls].iter_mut().enumerate() {
                *d = cfg.lambda_cls * d_cls[c * n_cls + k];
            }
        }
        for (o, d) in objects.iter().zip(&d_box) {
            let row = &mut gg.row_mut(o.row * det.side + o.col)[n_cls..];
            for (r, v) in row.iter_mut().zip(d) {
                *r += cfg.lambda_box * v;
            }
        }
        out.total += cfg.lambda_cls * cls + cfg.lambda_box * bx;
        out.cls.push(cls);
        out.boxes.push(bx);
    }
    let mut g_seg = Vec::with_capacity(seg.len());
    for (t, (logits, want)) in seg.iter().zip(&targets.seg).enumerate() {
        if logits.len() != want.len() || logits.len() != targets.seg_mask.len() {
            return Err(Error::dim(format!("segmentation element {t} raster size mismatch")));
        }
        let (l, mut d) = bce_masked(logits.data(), want.data(), &targets.seg_mask);
        let w = cfg.seg_weight(t);
        d.iter_mut().for_each(|v| *v *= w);
        out.total += w * l;
        out.seg.push(l);
        g_seg.push(Tensor::from_vec(logits.shape(), d)?);
    }
    Ok((out, LossGrads { det: g_det, seg: g_seg }))
}
