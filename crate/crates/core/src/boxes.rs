//! Ground-truth boxes, detections, and their encoding on the BEV grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eyes::BevGrid;

/// Number of regression channels: Δx, Δy, z, ln l, ln h, ln w, sin θ, cos θ, v_x, v_y.
pub const REG_CHANNELS: usize = 10;

/// Upright 3D box in the ego frame. `l` runs along the heading, `w` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub class: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Box3d {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.vx, self.vy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.l > 0.0 && self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Domain(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    /// Ground footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| (self.x + c * a - s * b, self.y + s * a + c * b))
    }

    /// `true` when the ground point `(px, py)` lies inside the footprint.
    pub fn contains_xy(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let a = c * dx + s * dy;
        let b = -s * dx + c * dy;
        a.abs() <= self.l / 2.0 && b.abs() <= self.w / 2.0
    }
}

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3d,
    pub score: f64,
}

impl fmt::Display for Detection {
    /// `class score x y z l w h yaw vx vy`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.bbox;
        write!(
            f,
            "{} {} {} {} {} {} {} {} {} {} {}",
            b.class, self.score, b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.vx, b.vy
        )
    }
}

impl FromStr for Detection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 11 {
            return Err(Error::Format(format!("expected 11 fields per detection, got {}", parts.len())));
        }
        let class = parts[0].parse().map_err(|_| Error::Format(format!("bad class {:?}", parts[0])))?;
        let mut v = [0.0; 10];
        for (slot, p) in v.iter_mut().zip(&parts[1..]) {
            *slot = p.parse().map_err(|_| Error::Format(format!("bad number {p:?}")))?;
        }
        Ok(Detection {
            score: v[0],
            bbox: Box3d { class, x: v[1], y: v[2], z: v[3], l: v[4], w: v[5], h: v[6], yaw: v[7], vx: v[8], vy: v[9] },
        })
    }
}

/// A box encoded at the BEV cell holding its center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    pub row: usize,
    pub col: usize,
    /// Center minus the cell center, in cells.
    pub dx: f64,
    pub dy: f64,
    pub z: f64,
    pub l: f64,
    pub h: f64,
    pub w: f64,
    pub sin: f64,
    pub cos: f64,
    pub vx: f64,
    pub vy: f64,
    pub class: usize,
    pub group: usize,
}

impl BoxTarget {
    /// `None` when the center falls outside the grid.
    pub fn encode(b: &Box3d, grid: BevGrid, group: usize) -> Option<Self> {
        let (rc, cc) = grid.to_cell(b.x, b.y);
        let (row, col) = ((rc + 0.5).floor(), (cc + 0.5).floor());
        let side = grid.side as f64;
        if !(0.0..side).contains(&row) || !(0.0..side).contains(&col) {
            return None;
        }
        let (row, col) = (row as usize, col as usize);
        let (cx, cy) = grid.cell_center(row, col);
        Some(BoxTarget {
            row,
            col,
            dx: (b.x - cx) / grid.cell,
            dy: (b.y - cy) / grid.cell,
            z: b.z,
            l: b.l,
            h: b.h,
            w: b.w,
            sin: b.yaw.sin(),
            cos: b.yaw.cos(),
            vx: b.vx,
            vy: b.vy,
            class: b.class,
            group,
        })
    }

    /// Regression vector in channel order; sizes are log-encoded.
    pub fn regression(&self) -> [f64; REG_CHANNELS] {
        [self.dx, self.dy, self.z, self.l.ln(), self.h.ln(), self.w.ln(), self.sin, self.cos, self.vx, self.vy]
    }
}

/// Inverse of [`BoxTarget::regression`] at cell `(row, col)`.
pub fn decode_box(reg: &[f64], row: usize, col: usize, class: usize, grid: BevGrid) -> Box3d {
    let (cx, cy) = grid.cell_center(row, col);
    Box3d {
        class,
        x: cx + reg[0] * grid.cell,
        y: cy + reg[1] * grid.cell,
        z: reg[2],
        l: reg[3].exp(),
        h: reg[4].exp(),
        w: reg[5].exp(),
        yaw: reg[6].atan2(reg[7]),
        vx: reg[8],
        vy: reg[9],
    }
}

/// Splats a Gaussian peak (value 1 at the center cell) into channel `ch` of
/// a `side x side x channels` heatmap, keeping the elementwise maximum.
pub fn draw_gaussian(heat: &mut [f64], side: usize, channels: usize, ch: usize, row: usize, col: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for di in -r..=r {
        for dj in -r..=r {
            let (i, j) = (row as isize + di, col as isize + dj);
            if i < 0 || j < 0 || i >= side as isize || j >= side as isize {
                continue;
            }
            let g = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
            let slot = &mut heat[(i as usize * side + j as usize) * channels + ch];
            *slot = slot.max(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_box() -> Box3d {
        Box3d { class: 1, x: 2.3, y: -1.1, z: 0.7, l: 4.0, w: 1.8, h: 1.5, yaw: 0.4, vx: 0.5, vy: -0.2 }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let grid = BevGrid::new(32, 0.5).unwrap();
        let b = sample_box();
        let t = BoxTarget::encode(&b, grid, 0).unwrap();
        assert!(t.dx.abs() <= 0.5 && t.dy.abs() <= 0.5);
        let d = decode_box(&t.regression(), t.row, t.col, b.class, grid);
        for (a, e) in [d.x, d.y, d.z, d.l, d.w, d.h, d.yaw, d.vx, d.vy]
            .iter()
            .zip([b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.vx, b.vy])
        {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((t.sin * t.sin + t.cos * t.cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outside_grid_is_none() {
        let grid = BevGrid::new(8, 0.5).unwrap();
        let b = Box3d { x: 2.1, ..sample_box() };
        assert!(BoxTarget::encode(&b, grid, 0).is_none());
    }

    #[test]
    fn detection_line_roundtrip() {
        let d = Detection { bbox: sample_box(), score: 0.75 };
        let back: Detection = d.to_string().parse().unwrap();
        assert_eq!(back, d);
        assert!("1 2 3".parse::<Detection>().is_err());
    }

    #[test]
    fn gaussian_peak_and_falloff() {
        let mut heat = vec![0.0; 5 * 5 * 2];
        draw_gaussian(&mut heat, 5, 2, 1, 2, 2, 2);
        assert_eq!(heat[(2 * 5 + 2) * 2 + 1], 1.0);
        assert_eq!(heat[(2 * 5 + 2) * 2], 0.0);
        assert!(heat[(2 * 5 + 3) * 2 + 1] < 1.0 && heat[(2 * 5 + 3) * 2 + 1] > heat[(2 * 5 + 4) * 2 + 1]);
    }

    #[test]
    fn footprint_contains_center_not_far_points() {
        let b = sample_box();
        assert!(b.contains_xy(b.x, b.y));
        assert!(!b.contains_xy(b.x + 5.0, b.y));
        for (px, py) in b.footprint() {
            let (mx, my) = ((px + b.x) / 2.0, (py + b.y) / 2.0);
            assert!(b.contains_xy(mx, my));
        }
    }
}
