//! Multi-camera rig and the ego → camera → image projection.
//!
//! Image coordinates are normalized: `u` and `v` run over `[0, 1]` across the
//! image width and height. A point is visible to a camera when it lands
//! strictly inside the unit square with positive camera depth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat34 = [[f64; 4]; 3];

/// Depths below this magnitude make the perspective divide singular.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub f_u: f64,
    pub f_v: f64,
    pub c_u: f64,
    pub c_v: f64,
    #[serde(default)]
    pub b_x: f64,
}

impl Intrinsics {
    pub fn new(f_u: f64, f_v: f64, c_u: f64, c_v: f64) -> Result<Self> {
        let k = Intrinsics { f_u, f_v, c_u, c_v, b_x: 0.0 };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_u > 0.0 && self.f_v > 0.0) {
            return Err(Error::Domain(format!(
                "focal lengths must be positive, got ({}, {})",
                self.f_u, self.f_v
            )));
        }
        Ok(())
    }

    /// The 3x4 intrinsic projection acting on homogeneous camera coordinates.
    pub fn matrix(&self) -> Mat34 {
        [
            [self.f_u, 0.0, self.c_u, -self.f_u * self.b_x],
            [0.0, self.f_v, self.c_v, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]
    }
}

/// Rigid transform taking ego coordinates into camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    rotation: Mat3,
    translation: Vec3,
}

impl Extrinsics {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Extrinsics { rotation, translation })
    }

    pub fn identity() -> Self {
        Extrinsics {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera mounted at `position` (ego frame) looking along azimuth `yaw`
    /// and tilted down by `pitch` (radians). The camera frame is x right,
    /// y down, z along the optical axis.
    pub fn looking(position: Vec3, yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cy * cp, sy * cp, -sp];
        let right = [sy, -cy, 0.0];
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let t = mat_vec(&rotation, position);
        Extrinsics { rotation, translation: [-t[0], -t[1], -t[2]] }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Homogeneous 4x4 form.
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

fn check_rotation(r: &Mat3) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > ORTHONORMAL_TOL {
                return Err(Error::Domain(format!("rotation is not orthonormal (R R^T)[{i}][{j}] = {d}")));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::Domain(format!("rotation determinant is {det}, expected +1")));
    }
    Ok(())
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn mat_vec(m: &Mat3, p: Vec3) -> Vec3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Strictly inside the image and in front of the camera.
pub fn visible(p: &ImagePoint) -> bool {
    p.depth > 0.0 && p.u > 0.0 && p.u < 1.0 && p.v > 0.0 && p.v < 1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    /// Zero-based view index within the rig.
    pub view: usize,
}

impl CameraModel {
    /// `M = M_in · M_ex` as a 3x4 matrix acting on homogeneous ego points.
    pub fn projection_matrix(&self) -> Mat34 {
        let k = self.intrinsics.matrix();
        let e = self.extrinsics.matrix();
        let mut m = [[0.0; 4]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|n| k[i][n] * e[n][j]).sum();
            }
        }
        m
    }

    pub fn project(&self, point: Vec3) -> Result<ImagePoint> {
        let [x, y, z] = self.extrinsics.apply(point);
        if z.abs() < MIN_DEPTH {
            return Err(Error::ProjectionSingular { depth: z });
        }
        let k = &self.intrinsics;
        let u_h = k.f_u * x + k.c_u * z - k.f_u * k.b_x;
        let v_h = k.f_v * y + k.c_v * z;
        Ok(ImagePoint { u: u_h / z, v: v_h / z, depth: z })
    }

    /// Ego-frame ray `(origin, direction)` through normalized image point
    /// `(u, v)`; every point `origin + s·direction` with `s > 0` projects to it.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let r = &self.extrinsics.rotation;
        let t = &self.extrinsics.translation;
        let origin_cam = [k.b_x - t[0], -t[1], -t[2]];
        let dir_cam = [(u - k.c_u) / k.f_u, (v - k.c_v) / k.f_v, 1.0];
        let back = |p: Vec3| -> Vec3 { std::array::from_fn(|j| (0..3).map(|n| r[n][j] * p[n]).sum()) };
        (back(origin_cam), back(dir_cam))
    }

    /// Projection with the Jacobian of `(u, v)` with respect to the ego point,
    /// or `None` when the point is singular.
    pub fn project_with_jacobian(&self, point: Vec3) -> Option<(ImagePoint, [[f64; 3]; 2])> {
        let [x, y, z] = self.extrinsics.apply(point);
        if z.abs() < MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k.f_u * x - k.f_u * k.b_x) / z + k.c_u;
        let v = k.f_v * y / z + k.c_v;
        let r = &self.extrinsics.rotation;
        let du_dcam = [k.f_u / z, 0.0, -(k.f_u * x - k.f_u * k.b_x) / (z * z)];
        let dv_dcam = [0.0, k.f_v / z, -k.f_v * y / (z * z)];
        let mut jac = [[0.0; 3]; 2];
        for j in 0..3 {
            jac[0][j] = (0..3).map(|n| du_dcam[n] * r[n][j]).sum();
            jac[1][j] = (0..3).map(|n| dv_dcam[n] * r[n][j]).sum();
        }
        Some((ImagePoint { u, v, depth: z }, jac))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: Vec<CameraModel>,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>, image_width: usize, image_height: usize) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Domain("a rig needs at least one camera".into()));
        }
        let mut seen = vec![false; cameras.len()];
        for cam in &cameras {
            cam.intrinsics.validate()?;
            if cam.view >= cameras.len() || seen[cam.view] {
                return Err(Error::Domain(format!("view index {} is out of range or repeated", cam.view)));
            }
            seen[cam.view] = true;
        }
        let mut cameras = cameras;
        cameras.sort_by_key(|c| c.view);
        Ok(CameraRig { cameras, image_width, image_height })
    }

    /// `n_views` cameras at `height` above the ego origin, spaced evenly in
    /// azimuth starting straight ahead, each tilted down by `pitch_deg` with
    /// horizontal field of view `hfov_deg`.
    pub fn ring(n_views: usize, hfov_deg: f64, height: f64, pitch_deg: f64, width: usize, image_height: usize) -> Result<Self> {
        let f_u = 0.5 / (hfov_deg.to_radians() / 2.0).tan();
        let f_v = f_u * width as f64 / image_height as f64;
        let intr = Intrinsics::new(f_u, f_v, 0.5, 0.5)?;
        let cameras = (0..n_views)
            .map(|t| CameraModel {
                intrinsics: intr,
                extrinsics: Extrinsics::looking(
                    [0.0, 0.0, height],
                    std::f64::consts::TAU * t as f64 / n_views as f64,
                    pitch_deg.to_radians(),
                ),
                view: t,
            })
            .collect();
        Self::new(cameras, width, image_height)
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    /// Views into which each position projects visibly. Singular projections
    /// count as invisible.
    pub fn visibility_sets(&self, positions: &[Vec3]) -> Vec<Vec<usize>> {
        positions
            .iter()
            .map(|&p| {
                self.cameras
                    .iter()
                    .filter(|cam| cam.project(p).map(|ip| visible(&ip)).unwrap_or(false))
                    .map(|cam| cam.view)
                    .collect()
            })
            .collect()
    }

    /// Reorders cameras; `order[i]` is the old view placed at new view `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let cameras = order
            .iter()
            .enumerate()
            .map(|(i, &old)| {
                let mut c = self.cameras[old].clone();
                c.view = i;
                c
            })
            .collect();
        Self::new(cameras, self.image_width, self.image_height)
    }

    pub fn to_file(&self) -> RigFile {
        RigFile {
            image_width: self.image_width,
            image_height: self.image_height,
            units: IntrinsicUnits::Normalized,
            camera: self
                .cameras
                .iter()
                .map(|c| CameraEntry {
                    intrinsics: c.intrinsics,
                    rotation: c.extrinsics.rotation.iter().flatten().copied().collect(),
                    translation: c.extrinsics.translation.to_vec(),
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: RigFile = toml::from_str(&text)?;
        file.into_rig()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(&self.to_file()).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntrinsicUnits {
    #[default]
    Normalized,
    /// Focal lengths and principal point in pixels; divided by the image
    /// extents on load.
    Pixels,
}

/// On-disk rig description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub image_width: usize,
    pub image_height: usize,
    #[serde(default)]
    pub units: IntrinsicUnits,
    pub camera: Vec<CameraEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    #[serde(flatten)]
    pub intrinsics: Intrinsics,
    /// Row-major 3x3.
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl RigFile {
    pub fn into_rig(self) -> Result<CameraRig> {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        let cameras = self
            .camera
            .into_iter()
            .enumerate()
            .map(|(view, e)| {
                if e.rotation.len() != 9 || e.translation.len() != 3 {
                    return Err(Error::config(format!("camera {view}: rotation needs 9 values and translation 3")));
                }
                let mut k = e.intrinsics;
                if self.units == IntrinsicUnits::Pixels {
                    k.f_u /= w;
                    k.c_u /= w;
                    k.f_v /= h;
                    k.c_v /= h;
                }
                let r = &e.rotation;
                let rotation = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
                let extrinsics = Extrinsics::new(rotation, [e.translation[0], e.translation[1], e.translation[2]])?;
                Ok(CameraModel { intrinsics: k, extrinsics, view })
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras, self.image_width, self.image_height)
    }
}
