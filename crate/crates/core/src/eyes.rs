//! The polar grid of imaginary eyes and its resampling onto the rectangular
//! bird's-eye-view grid.
//!
//! Eye `q` sits on radial index `q / S` and ray `q % S`, so an `N_eyes x C`
//! feature tensor is also an `R x S x C` map with the angular axis periodic.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::camera::Vec3;
use crate::error::{Error, Result};
use crate::numerics::{Border, Taps, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EyeGrid {
    radial: usize,
    rays: usize,
    radii: Vec<f64>,
    angles: Vec<f64>,
    height: f64,
    positions: Vec<Vec3>,
}

impl EyeGrid {
    /// Eyes at uniformly spaced radii in `[r_min, r_max]` on `rays` evenly
    /// spaced azimuths starting at the ego x axis.
    pub fn build(radial: usize, rays: usize, r_min: f64, r_max: f64, height: f64) -> Result<Self> {
        if radial == 0 || rays == 0 {
            return Err(Error::Domain(format!("eye grid needs R >= 1 and S >= 1, got {radial}x{rays}")));
        }
        if !(r_min > 0.0 && r_min < r_max) || !height.is_finite() {
            return Err(Error::Domain(format!(
                "eye grid needs 0 < r_min < r_max, got [{r_min}, {r_max}]"
            )));
        }
        let radii: Vec<f64> = if radial == 1 {
            vec![r_min]
        } else {
            (0..radial)
                .map(|i| r_min + i as f64 * (r_max - r_min) / (radial - 1) as f64)
                .collect()
        };
        let angles: Vec<f64> = (0..rays).map(|j| TAU * j as f64 / rays as f64).collect();
        let mut positions = Vec::with_capacity(radial * rays);
        for &r in &radii {
            for &a in &angles {
                let (s, c) = a.sin_cos();
                positions.push([r * c, r * s, height]);
            }
        }
        Ok(EyeGrid { radial, rays, radii, angles, height, positions })
    }

    /// Eyes per polar ray (`R`).
    pub fn radial(&self) -> usize {
        self.radial
    }

    /// Number of rays (`S`).
    pub fn rays(&self) -> usize {
        self.rays
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn r_min(&self) -> f64 {
        self.radii[0]
    }

    pub fn r_max(&self) -> f64 {
        if self.radial == 1 {
            self.radii[0]
        } else {
            self.radii[self.radial - 1]
        }
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn index(&self, radial: usize, ray: usize) -> usize {
        radial * self.rays + ray
    }

    /// Continuous (radial index, ray index) of an ego-plane point, or `None`
    /// outside the covered annulus.
    pub fn polar_index(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let rho = x.hypot(y);
        let (lo, hi) = (self.radii[0], *self.radii.last().unwrap());
        let inside = if self.radial == 1 { rho == lo } else { rho >= lo && rho <= hi };
        if !inside {
            return None;
        }
        let a = if self.radial == 1 {
            0.0
        } else {
            (rho - lo) / (hi - lo) * (self.radial - 1) as f64
        };
        let theta = y.atan2(x).rem_euclid(TAU);
        Some((a, theta / TAU * self.rays as f64))
    }
}

/// Ego-centred square raster; row 0 is the far-forward edge (+x) and column 0
/// the far-left edge (+y).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub side: usize,
    /// Meters per cell.
    pub cell: f64,
}

impl BevGrid {
    pub fn new(side: usize, cell: f64) -> Result<Self> {
        if side == 0 || !(cell > 0.0) {
            return Err(Error::Domain(format!("BEV grid needs side >= 1 and cell > 0, got {side} / {cell}")));
        }
        Ok(BevGrid { side, cell })
    }

    /// Half the side length in meters.
    pub fn half_extent(&self) -> f64 {
        self.side as f64 * self.cell / 2.0
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let h = self.side as f64 / 2.0;
        ((h - row as f64 - 0.5) * self.cell, (h - col as f64 - 0.5) * self.cell)
    }

    /// Continuous (row, col) whose cell center is at ego `(x, y)`.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let h = self.side as f64 / 2.0;
        (h - x / self.cell - 0.5, h - y / self.cell - 0.5)
    }

    /// The same extent subdivided `ratio` times per axis.
    pub fn refined(&self, ratio: usize) -> Self {
        BevGrid { side: self.side * ratio, cell: self.cell / ratio as f64 }
    }

    /// `true` for cells whose center lies in the eye annulus.
    pub fn validity(&self, eyes: &EyeGrid) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.side * self.side);
        for r in 0..self.side {
            for c in 0..self.side {
                let (x, y) = self.cell_center(r, c);
                mask.push(eyes.polar_index(x, y).is_some());
            }
        }
        mask
    }
}

/// Precomputed polar → rectangular interpolation plan.
#[derive(Clone, Debug)]
pub struct BevSampler {
    target: BevGrid,
    radial: usize,
    rays: usize,
    taps: Vec<Option<Taps>>,
}

impl BevSampler {
    pub fn new(eyes: &EyeGrid, target: BevGrid) -> Self {
        let mut taps = Vec::with_capacity(target.side * target.side);
        for r in 0..target.side {
            for c in 0..target.side {
                let (x, y) = target.cell_center(r, c);
                taps.push(
                    eyes.polar_index(x, y)
                        .map(|(a, b)| Taps::new(eyes.radial(), eyes.rays(), a, b, Border::Clamp, Border::Wrap)),
                );
            }
        }
        BevSampler { target, radial: eyes.radial(), rays: eyes.rays(), taps }
    }

    pub fn target(&self) -> BevGrid {
        self.target
    }

    pub fn mask(&self) -> Vec<bool> {
        self.taps.iter().map(Option::is_some).collect()
    }

    /// `N_eyes x C` eye features to a `side x side x C` map; cells outside the
    /// annulus are zero.
    pub fn forward(&self, eye_features: &Tensor) -> Result<Tensor> {
        let c = self.channels(eye_features)?;
        let side = self.target.side;
        let mut out = Tensor::zeros(&[side, side, c]);
        let od = out.data_mut();
        for (cell, t) in self.taps.iter().enumerate() {
            if let Some(t) = t {
                t.accumulate(eye_features.data(), c, 1.0, &mut od[cell * c..(cell + 1) * c]);
            }
        }
        Ok(out)
    }

    /// Transpose of [`BevSampler::forward`].
    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let c = grad_out.shape()[2];
        let mut d = Tensor::zeros(&[self.radial * self.rays, c]);
        for (cell, t) in self.taps.iter().enumerate() {
            if let Some(t) = t {
                t.scatter(d.data_mut(), c, 1.0, &grad_out.data()[cell * c..(cell + 1) * c]);
            }
        }
        d
    }

    fn channels(&self, eye_features: &Tensor) -> Result<usize> {
        match *eye_features.shape() {
            [n, c] if n == self.radial * self.rays => Ok(c),
            _ => Err(Error::dim(format!(
                "expected {} x C eye features, got {:?}",
                self.radial * self.rays,
                eye_features.shape()
            ))),
        }
    }
}

/// Resamples polar eye features onto `target`, returning the map and its
/// validity mask.
pub fn bev_sample(eye_features: &Tensor, eyes: &EyeGrid, target: BevGrid) -> Result<(Tensor, Vec<bool>)> {
    let sampler = BevSampler::new(eyes, target);
    Ok((sampler.forward(eye_features)?, sampler.mask()))
}
