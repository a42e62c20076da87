//! Portable-pixmap (P6) emitters for eye features, masks and boxes.

use std::path::Path;

use crate::boxes::{Box3d, Detection};
use crate::error::{Error, Result};
use crate::eyes::{BevGrid, BevSampler, EyeGrid};
use crate::numerics::ops::sigmoid;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s:?}")));
        if fields[0] != "P6" || num(&fields[3])? != 255 {
            return Err(Error::Format("only 8-bit P6 is supported".into()));
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let data = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
        if data.len() != width * height * 3 {
            return Err(Error::Format(format!("PPM body has {} bytes, expected {}", data.len(), width * height * 3)));
        }
        Ok(Image { width, height, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscaled(&self, factor: usize) -> Image {
        let mut out = Image::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Black → red → yellow → white ramp over `[0, 1]`.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [byte(t), byte(t - 1.0), byte(t - 2.0)]
}

/// Mean over the channel axis of an `N x C` tensor.
pub fn channel_mean(features: &Tensor) -> Vec<f64> {
    let c = *features.shape().last().unwrap_or(&1);
    features.data().chunks(c.max(1)).map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
}

/// Values scaled to `[0, 1]` by their range; a constant input (up to
/// round-off) maps to 0.5.
fn normalize(values: &[f64], valid: impl Fn(usize) -> bool) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if valid(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    values
        .iter()
        .map(|&v| if hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1.0) { (v - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

/// Channel-mean heat map of `N_eyes x C` features in polar layout: one row
/// per radial index (nearest first), one column per ray.
pub fn eye_heatmap_polar(features: &Tensor, eyes: &EyeGrid) -> Result<Image> {
    if features.shape().first() != Some(&eyes.len()) {
        return Err(Error::dim(format!("{} eyes, features {:?}", eyes.len(), features.shape())));
    }
    let v = normalize(&channel_mean(features), |_| true);
    let mut img = Image::new(eyes.rays(), eyes.radial());
    for a in 0..eyes.radial() {
        for b in 0..eyes.rays() {
            img.set(b, a, heat_color(v[eyes.index(a, b)]));
        }
    }
    Ok(img)
}

/// Channel-mean heat map resampled onto `bev`; cells outside the annulus
/// are black.
pub fn eye_heatmap_rect(features: &Tensor, eyes: &EyeGrid, bev: BevGrid) -> Result<Image> {
    let mean = Tensor::from_vec(&[eyes.len(), 1], channel_mean(features))?;
    let sampler = BevSampler::new(eyes, bev);
    let mask = sampler.mask();
    let map = sampler.forward(&mean)?;
    let v = normalize(map.data(), |i| mask[i]);
    let mut img = Image::new(bev.side, bev.side);
    for r in 0..bev.side {
        for c in 0..bev.side {
            let i = r * bev.side + c;
            if mask[i] {
                img.set(c, r, heat_color(v[i]));
            }
        }
    }
    Ok(img)
}

/// Prediction (`sigmoid(logit) >= threshold`) in red, truth in green, both
/// yellow; cells outside `valid` are dark gray.
pub fn mask_overlay(logits: &Tensor, truth: &Tensor, valid: &[bool], threshold: f64) -> Result<Image> {
    let [h, w] = *logits.shape() else {
        return Err(Error::dim(format!("mask overlay expects HxW logits, got {:?}", logits.shape())));
    };
    if truth.shape() != logits.shape() || valid.len() != h * w {
        return Err(Error::dim("mask overlay inputs disagree in size"));
    }
    let mut img = Image::new(w, h);
    for i in 0..h * w {
        let rgb = if !valid[i] {
            [40, 40, 40]
        } else {
            let p = sigmoid(logits.data()[i]) >= threshold;
            let t = truth.data()[i] >= 0.5;
            [if p { 230 } else { 0 }, if t { 200 } else { 0 }, 0]
        };
        img.set(i % w, i / w, rgb);
    }
    Ok(img)
}

fn draw_segment(img: &mut Image, a: (f64, f64), b: (f64, f64), rgb: [u8; 3]) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(x as usize, y as usize, rgb);
        }
    }
}

/// Pixel (x right, y down) of ego point `(px, py)` on a canvas with
/// `scale` pixels per BEV cell.
pub fn canvas_pixel(bev: BevGrid, scale: usize, px: f64, py: f64) -> (f64, f64) {
    let (r, c) = bev.to_cell(px, py);
    ((c + 0.5) * scale as f64, (r + 0.5) * scale as f64)
}

fn draw_box(img: &mut Image, bev: BevGrid, scale: usize, b: &Box3d, rgb: [u8; 3]) {
    let corners = b.footprint().map(|(x, y)| canvas_pixel(bev, scale, x, y));
    for k in 0..4 {
        draw_segment(img, corners[k], corners[(k + 1) % 4], rgb);
    }
    let (hx, hy) = (b.x + b.yaw.cos() * b.l / 2.0, b.y + b.yaw.sin() * b.l / 2.0);
    draw_segment(img, canvas_pixel(bev, scale, b.x, b.y), canvas_pixel(bev, scale, hx, hy), rgb);
}

/// Ground truth in green and predictions in red on a `side·scale` canvas,
/// with the ego at the center.
pub fn boxes_canvas(bev: BevGrid, scale: usize, gts: &[Box3d], preds: &[Detection]) -> Image {
    let side = bev.side * scale;
    let mut img = Image::new(side, side);
    img.data.fill(24);
    let (ex, ey) = canvas_pixel(bev, scale, 0.0, 0.0);
    draw_segment(&mut img, (ex - 2.0, ey), (ex + 2.0, ey), [255, 255, 255]);
    draw_segment(&mut img, (ex, ey - 2.0), (ex, ey + 2.0), [255, 255, 255]);
    for b in gts {
        draw_box(&mut img, bev, scale, b, [40, 220, 40]);
    }
    for d in preds {
        draw_box(&mut img, bev, scale, &d.bbox, [240, 40, 40]);
    }
    img
}

/// An `H x W x 3` image tensor with values in `[0, 1]`.
pub fn image_from_tensor(t: &Tensor) -> Result<Image> {
    let [h, w, 3] = *t.shape() else {
        return Err(Error::dim(format!("expected HxWx3, got {:?}", t.shape())));
    };
    Ok(Image { width: w, height: h, data: t.data().iter().map(|&v| byte(v)).collect() })
}

/// Writes every view of a scene and the model outputs into `dir`:
/// `camera_v{t}.ppm`, `eyes_polar.ppm`, `eyes_rect.ppm`, `mask_{element}.ppm`
/// and `boxes.ppm`.
pub fn emit_all(
    dir: impl AsRef<Path>,
    scene: &crate::harness::scene::SyntheticScene,
    outputs: &crate::harness::model::Outputs,
    preds: &[Detection],
    pipe: &crate::harness::model::Pipeline,
    cfg: &crate::harness::config::RunConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (t, img) in scene.images.iter().enumerate() {
        image_from_tensor(img)?.save(dir.join(format!("camera_v{t}.ppm")))?;
    }
    eye_heatmap_polar(&outputs.eye_features, &pipe.eyes)?.save(dir.join("eyes_polar.ppm"))?;
    eye_heatmap_rect(&outputs.eye_features, &pipe.eyes, pipe.bev)?.save(dir.join("eyes_rect.ppm"))?;
    for (e, name) in cfg.loss.elements.iter().enumerate() {
        mask_overlay(&outputs.seg[e], &scene.rasters[e], &pipe.seg_mask, cfg.eval.iou_threshold)?
            .save(dir.join(format!("mask_{name}.ppm")))?;
    }
    boxes_canvas(pipe.bev, 8, &scene.boxes, preds).save(dir.join("boxes.ppm"))?;
    Ok(())
}
