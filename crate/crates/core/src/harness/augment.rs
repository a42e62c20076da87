//! BEV-space augmentation: flips, rotation and scaling applied identically to
//! feature maps, rasters (bilinear) and boxes (analytic).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::Box3d;
use crate::error::{Error, Result};
use crate::eyes::BevGrid;
use crate::harness::config::AugmentConfig;
use crate::numerics::Tensor;

/// `p' = scale · R(angle) · F · p` with `F` negating x and/or y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Radians, counter-clockwise.
    pub angle: f64,
    pub scale: f64,
}

impl Default for Transform {
    fn default() -> Self {
        Transform::IDENTITY
    }
}

impl Transform {
    pub const IDENTITY: Transform = Transform { flip_x: false, flip_y: false, angle: 0.0, scale: 1.0 };

    /// Each enabled component is applied with `cfg.probability`.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Transform::IDENTITY;
        }
        let mut t = Transform::IDENTITY;
        let p = cfg.probability;
        // draw every coin regardless of switches so the stream does not shift
        let coins: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let angle = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
        let scale = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        t.flip_x = cfg.flip_x && coins[0] < p;
        t.flip_y = cfg.flip_y && coins[1] < p;
        if cfg.rotate && coins[2] < p {
            t.angle = angle;
        }
        if cfg.scale && coins[3] < p {
            t.scale = scale;
        }
        t
    }

    pub fn is_identity(&self) -> bool {
        *self == Transform::IDENTITY
    }

    fn flip(&self, x: f64, y: f64) -> (f64, f64) {
        (if self.flip_x { -x } else { x }, if self.flip_y { -y } else { y })
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (fx, fy) = self.flip(x, y);
        let (s, c) = self.angle.sin_cos();
        (self.scale * (c * fx - s * fy), self.scale * (s * fx + c * fy))
    }

    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (x / self.scale, y / self.scale);
        self.flip(c * x + s * y, -s * x + c * y)
    }

    pub fn apply_yaw(&self, yaw: f64) -> f64 {
        let mut y = yaw;
        if self.flip_x {
            y = std::f64::consts::PI - y;
        }
        if self.flip_y {
            y = -y;
        }
        let y = y + self.angle;
        y.sin().atan2(y.cos())
    }

    pub fn apply_box(&self, b: &Box3d) -> Box3d {
        let (x, y) = self.apply_point(b.x, b.y);
        let (fvx, fvy) = self.flip(b.vx, b.vy);
        let (s, c) = self.angle.sin_cos();
        Box3d {
            class: b.class,
            x,
            y,
            z: b.z * self.scale,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: self.apply_yaw(b.yaw),
            vx: self.scale * (c * fvx - s * fvy),
            vy: self.scale * (s * fvx + c * fvy),
        }
    }
}

/// Resampling plan of a transform on one grid: output cell `i` reads
/// bilinearly from the source cells around `T⁻¹(center_i)`; taps outside the
/// grid read zero.
#[derive(Clone, Debug)]
pub struct Warp {
    side: usize,
    taps: Vec<Vec<(usize, f64)>>,
    nearest: Vec<Option<usize>>,
}

impl Warp {
    pub fn new(t: &Transform, grid: BevGrid) -> Self {
        let side = grid.side;
        let mut taps = Vec::with_capacity(side * side);
        let mut nearest = Vec::with_capacity(side * side);
        let inside = |r: f64, c: f64| r >= 0.0 && c >= 0.0 && r <= (side - 1) as f64 && c <= (side - 1) as f64;
        for row in 0..side {
            for col in 0..side {
                let (x, y) = grid.cell_center(row, col);
                let (sx, sy) = t.inverse_point(x, y);
                let (r, c) = grid.to_cell(sx, sy);
                let (r0, c0) = (r.floor(), c.floor());
                let (fr, fc) = (r - r0, c - c0);
                let mut cell = Vec::with_capacity(4);
                for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
                    for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
                        let w = wr * wc;
                        let (rr, cc) = (r0 + dr, c0 + dc);
                        if w > 0.0 && inside(rr, cc) {
                            cell.push((rr as usize * side + cc as usize, w));
                        }
                    }
                }
                taps.push(cell);
                let (nr, nc) = (r.round(), c.round());
                nearest.push(inside(nr, nc).then(|| nr as usize * side + nc as usize));
            }
        }
        Warp { side, taps, nearest }
    }

    fn dims(&self, map: &Tensor) -> Result<usize> {
        let s = map.shape();
        if s.len() < 2 || s[0] != self.side || s[1] != self.side {
            return Err(Error::dim(format!("warp expects a {0}x{0}[xC] map, got {s:?}", self.side)));
        }
        Ok(s[2..].iter().product())
    }

    /// Warps a `side x side` or `side x side x C` map.
    pub fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let c = self.dims(map)?;
        let mut out = Tensor::zeros(map.shape());
        let (src, dst) = (map.data(), out.data_mut());
        for (i, cell) in self.taps.iter().enumerate() {
            for &(j, w) in cell {
                for k in 0..c {
                    dst[i * c + k] += w * src[j * c + k];
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Warp::forward`].
    pub fn backward(&self, grad: &Tensor) -> Tensor {
        let c: usize = grad.shape()[2..].iter().product();
        let mut out = Tensor::zeros(grad.shape());
        let (g, dst) = (grad.data(), out.data_mut());
        for (i, cell) in self.taps.iter().enumerate() {
            for &(j, w) in cell {
                for k in 0..c {
                    dst[j * c + k] += w * g[i * c + k];
                }
            }
        }
        out
    }

    /// Output cell is valid when its nearest source cell is.
    pub fn warp_mask(&self, mask: &[bool]) -> Vec<bool> {
        self.nearest.iter().map(|n| n.is_some_and(|j| mask[j])).collect()
    }
}

/// Augmented map and boxes. `cropped[i]` marks boxes whose center left the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub map: Tensor,
    pub boxes: Vec<Box3d>,
    pub cropped: Vec<bool>,
    pub transform: Transform,
}

pub fn transform_boxes(t: &Transform, boxes: &[Box3d], grid: BevGrid) -> (Vec<Box3d>, Vec<bool>) {
    let h = grid.half_extent();
    let out: Vec<Box3d> = boxes.iter().map(|b| t.apply_box(b)).collect();
    let cropped = out.iter().map(|b| b.x.abs() >= h || b.y.abs() >= h).collect();
    (out, cropped)
}

/// Draws a transform from `seed` and applies it to a feature map or raster
/// laid out on `grid`, and to `boxes`.
pub fn bev_augment(map: &Tensor, boxes: &[Box3d], grid: BevGrid, cfg: &AugmentConfig, seed: u64) -> Result<Augmented> {
    let transform = Transform::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let map = if transform.is_identity() { map.clone() } else { Warp::new(&transform, grid).forward(map)? };
    let (boxes, cropped) = transform_boxes(&transform, boxes, grid);
    Ok(Augmented { map, boxes, cropped, transform })
}
