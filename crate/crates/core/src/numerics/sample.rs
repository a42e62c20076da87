//! Bilinear sampling of `H x W x C` maps.
//!
//! Locations come either in index space (row, col), or normalized so that
//! `(u, v) = (0, 0)` is the center of the top-left cell and `(1, 1)` the
//! center of the bottom-right cell; `u` runs along columns, `v` along rows.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How an axis treats coordinates beyond its extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Replicate the border cell; the coordinate gradient vanishes outside.
    Clamp,
    /// Periodic axis.
    Wrap,
}

/// The four corner cells touched by one bilinear lookup, their weights and the
/// weight derivatives with respect to the row and column coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub cell: [usize; 4],
    pub weight: [f64; 4],
    pub d_row: [f64; 4],
    pub d_col: [f64; 4],
}

struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
    d_frac: f64,
}

fn axis_tap(n: usize, x: f64, border: Border) -> AxisTap {
    match border {
        Border::Clamp => {
            if n == 1 {
                return AxisTap { lo: 0, hi: 0, frac: 0.0, d_frac: 0.0 };
            }
            let top = (n - 1) as f64;
            let (xc, d_frac) = if x < 0.0 {
                (0.0, 0.0)
            } else if x > top {
                (top, 0.0)
            } else {
                (x, 1.0)
            };
            let lo = (xc.floor() as usize).min(n - 2);
            AxisTap { lo, hi: lo + 1, frac: xc - lo as f64, d_frac }
        }
        Border::Wrap => {
            let xw = x.rem_euclid(n as f64);
            let lo = (xw.floor() as usize).min(n - 1);
            AxisTap { lo, hi: (lo + 1) % n, frac: xw - lo as f64, d_frac: 1.0 }
        }
    }
}

impl Taps {
    /// Corner taps for index-space location `(row, col)` on an `h x w` grid.
    pub fn new(h: usize, w: usize, row: f64, col: f64, row_border: Border, col_border: Border) -> Self {
        let r = axis_tap(h, row, row_border);
        let c = axis_tap(w, col, col_border);
        let (fr, fc) = (r.frac, c.frac);
        Taps {
            cell: [r.lo * w + c.lo, r.lo * w + c.hi, r.hi * w + c.lo, r.hi * w + c.hi],
            weight: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
            d_row: [
                -r.d_frac * (1.0 - fc),
                -r.d_frac * fc,
                r.d_frac * (1.0 - fc),
                r.d_frac * fc,
            ],
            d_col: [
                -c.d_frac * (1.0 - fr),
                c.d_frac * (1.0 - fr),
                -c.d_frac * fr,
                c.d_frac * fr,
            ],
        }
    }

    /// Taps for a normalized `(u, v)` location with border clamping on both axes.
    pub fn normalized(h: usize, w: usize, u: f64, v: f64) -> Self {
        let row = v * (h.max(1) - 1) as f64;
        let col = u * (w.max(1) - 1) as f64;
        let mut t = Self::new(h, w, row, col, Border::Clamp, Border::Clamp);
        let (sr, sc) = ((h.max(1) - 1) as f64, (w.max(1) - 1) as f64);
        for k in 0..4 {
            t.d_row[k] *= sr;
            t.d_col[k] *= sc;
        }
        t
    }

    /// `out += scale * sample`
    #[inline]
    pub fn accumulate(&self, map: &[f64], channels: usize, scale: f64, out: &mut [f64]) {
        for k in 0..4 {
            let w = self.weight[k] * scale;
            if w == 0.0 {
                continue;
            }
            let src = &map[self.cell[k] * channels..(self.cell[k] + 1) * channels];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }

    /// `d_map += scale * weights ⊗ grad`
    #[inline]
    pub fn scatter(&self, d_map: &mut [f64], channels: usize, scale: f64, grad: &[f64]) {
        for k in 0..4 {
            let w = self.weight[k] * scale;
            if w == 0.0 {
                continue;
            }
            let dst = &mut d_map[self.cell[k] * channels..(self.cell[k] + 1) * channels];
            for (d, g) in dst.iter_mut().zip(grad) {
                *d += w * g;
            }
        }
    }

    /// Gradient of `<grad, sample>` with respect to the (row, col) coordinates
    /// (or `(v, u)` for normalized taps).
    #[inline]
    pub fn location_grad(&self, map: &[f64], channels: usize, grad: &[f64]) -> (f64, f64) {
        let mut dr = 0.0;
        let mut dc = 0.0;
        for k in 0..4 {
            if self.d_row[k] == 0.0 && self.d_col[k] == 0.0 {
                continue;
            }
            let src = &map[self.cell[k] * channels..(self.cell[k] + 1) * channels];
            let p: f64 = src.iter().zip(grad).map(|(a, b)| a * b).sum();
            dr += self.d_row[k] * p;
            dc += self.d_col[k] * p;
        }
        (dr, dc)
    }
}

fn map_dims(map: &Tensor) -> Result<(usize, usize, usize)> {
    match *map.shape() {
        [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
        _ => Err(Error::dim(format!("expected a non-empty HxWxC map, got {:?}", map.shape()))),
    }
}

/// Bilinear lookup at normalized `(u, v)`; out-of-range locations clamp to the border.
pub fn bilinear_sample(map: &Tensor, u: f64, v: f64) -> Result<Vec<f64>> {
    let (h, w, c) = map_dims(map)?;
    let taps = Taps::normalized(h, w, u, v);
    let mut out = vec![0.0; c];
    taps.accumulate(map.data(), c, 1.0, &mut out);
    Ok(out)
}

/// Gradients of `<grad, bilinear_sample(map, u, v)>` with respect to the map
/// and to `(u, v)`.
pub fn bilinear_sample_backward(map: &Tensor, u: f64, v: f64, grad: &[f64]) -> Result<(Tensor, f64, f64)> {
    let (h, w, c) = map_dims(map)?;
    let taps = Taps::normalized(h, w, u, v);
    let mut d_map = Tensor::zeros_like(map);
    taps.scatter(d_map.data_mut(), c, 1.0, grad);
    let (dv, du) = taps.location_grad(map.data(), c, grad);
    Ok((d_map, du, dv))
}

/// Bilinear upsampling of an `H x W x C` map by an integer factor using
/// half-pixel centers and border clamping.
pub fn upsample_bilinear(map: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = map_dims(map)?;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    for i in 0..ho {
        for j in 0..wo {
            let taps = upsample_taps(h, w, factor, i, j);
            taps.accumulate(map.data(), c, 1.0, &mut out.data_mut()[(i * wo + j) * c..(i * wo + j + 1) * c]);
        }
    }
    Ok(out)
}

/// Backward of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(grad_out: &Tensor, h: usize, w: usize, factor: usize) -> Tensor {
    let c = grad_out.shape()[2];
    let wo = w * factor;
    let mut d_map = Tensor::zeros(&[h, w, c]);
    for i in 0..h * factor {
        for j in 0..wo {
            let taps = upsample_taps(h, w, factor, i, j);
            taps.scatter(d_map.data_mut(), c, 1.0, &grad_out.data()[(i * wo + j) * c..(i * wo + j + 1) * c]);
        }
    }
    d_map
}

fn upsample_taps(h: usize, w: usize, factor: usize, i: usize, j: usize) -> Taps {
    let f = factor as f64;
    let row = (i as f64 + 0.5) / f - 0.5;
    let col = (j as f64 + 0.5) / f - 0.5;
    Taps::new(h, w, row, col, Border::Clamp, Border::Clamp)
}
