//! Synthetic flat-world scenes: straight roads with a painted divider and
//! upright colored boxes, rendered per camera by casting one ray per pixel.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::Box3d;
use crate::camera::{CameraRig, RigFile, Vec3};
use crate::decoder::SceneInput;
use crate::error::{Error, Result};
use crate::eyes::BevGrid;
use crate::harness::config::RunConfig;
use crate::numerics::Tensor;

/// Segmentation elements the generator can rasterize.
pub const ELEMENTS: [&str; 2] = ["drivable", "divider"];

const SKY: [f64; 3] = [0.62, 0.78, 0.95];
const GRASS: [f64; 3] = [0.24, 0.48, 0.22];
const ROAD: [f64; 3] = [0.33, 0.33, 0.35];
const DIVIDER: [f64; 3] = [0.93, 0.82, 0.18];
const CLASS_COLORS: [[f64; 3]; 4] = [[0.86, 0.12, 0.10], [0.12, 0.28, 0.90], [0.95, 0.95, 0.95], [0.55, 0.20, 0.70]];

/// A straight road along the x axis (`along_x`) or the y axis, bounded
/// across its direction by `[lo, hi]`, with a divider band inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub along_x: bool,
    pub lo: f64,
    pub hi: f64,
    pub divider_lo: f64,
    pub divider_hi: f64,
}

impl Road {
    fn across(&self, x: f64, y: f64) -> f64 {
        if self.along_x {
            y
        } else {
            x
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.lo..=self.hi).contains(&self.across(x, y))
    }

    pub fn divider_contains(&self, x: f64, y: f64) -> bool {
        (self.divider_lo..=self.divider_hi).contains(&self.across(x, y))
    }
}

pub fn element_at(element: &str, roads: &[Road], x: f64, y: f64) -> bool {
    match element {
        "drivable" => roads.iter().any(|r| r.contains(x, y)),
        "divider" => roads.iter().any(|r| r.divider_contains(x, y)),
        _ => false,
    }
}

fn ground_color(roads: &[Road], x: f64, y: f64) -> [f64; 3] {
    if roads.iter().any(|r| r.divider_contains(x, y)) {
        DIVIDER
    } else if roads.iter().any(|r| r.contains(x, y)) {
        ROAD
    } else {
        GRASS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub rig: CameraRig,
    pub images: Vec<Tensor>,
    pub boxes: Vec<Box3d>,
    pub roads: Vec<Road>,
    pub elements: Vec<String>,
    /// Per element, `side_r x side_r` with 1 inside the element.
    pub rasters: Vec<Tensor>,
}

impl SyntheticScene {
    pub fn input(&self) -> Result<SceneInput> {
        SceneInput::new(self.rig.clone(), self.images.clone())
    }
}

pub fn build_rig(cfg: &RunConfig) -> Result<CameraRig> {
    let s = &cfg.scene;
    CameraRig::ring(s.views, s.hfov_deg, s.camera_height, s.pitch_deg, s.image_width, s.image_height)
}

/// Ray parameter of the nearest hit with an upright box, if any.
fn hit_box(b: &Box3d, o: Vec3, d: Vec3) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let (ox, oy) = (o[0] - b.x, o[1] - b.y);
    let lo = [c * ox + s * oy, -s * ox + c * oy, o[2] - (b.z - b.h / 2.0)];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let half = [b.l / 2.0, b.w / 2.0];
    let bounds = [(-half[0], half[0]), (-half[1], half[1]), (0.0, b.h)];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let (a, z) = bounds[k];
        if ld[k].abs() < 1e-15 {
            if lo[k] < a || lo[k] > z {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((a - lo[k]) / ld[k], (z - lo[k]) / ld[k]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t1 > 0.0).then_some(t0.max(0.0))
}

/// Renders one view. Pixel `(row, col)` samples normalized image point
/// `(col / (W - 1), row / (H - 1))`, the convention of the bilinear sampler.
pub fn render_view(rig: &CameraRig, view: usize, roads: &[Road], boxes: &[Box3d]) -> Tensor {
    let (w, h) = (rig.image_width, rig.image_height);
    let cam = &rig.cameras()[view];
    let mut img = Tensor::zeros(&[h, w, 3]);
    let data = img.data_mut();
    for row in 0..h {
        for col in 0..w {
            let (o, d) = cam.pixel_ray(col as f64 / (w - 1) as f64, row as f64 / (h - 1) as f64);
            let t_ground = if d[2] < 0.0 { Some(-o[2] / d[2]) } else { None };
            let mut best = t_ground.map(|t| (t, ground_color(roads, o[0] + t * d[0], o[1] + t * d[1])));
            for b in boxes {
                if let Some(t) = hit_box(b, o, d) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, CLASS_COLORS[b.class % CLASS_COLORS.len()]));
                    }
                }
            }
            let color = best.map_or(SKY, |(_, c)| c);
            data[(row * w + col) * 3..(row * w + col + 1) * 3].copy_from_slice(&color);
        }
    }
    img
}

/// `side x side` raster of one element: 1 where the cell center lies inside.
pub fn rasterize(element: &str, roads: &[Road], grid: BevGrid) -> Tensor {
    let mut t = Tensor::zeros(&[grid.side, grid.side]);
    for r in 0..grid.side {
        for c in 0..grid.side {
            let (x, y) = grid.cell_center(r, c);
            if element_at(element, roads, x, y) {
                t.data_mut()[r * grid.side + c] = 1.0;
            }
        }
    }
    t
}

/// `side x side` occupancy of box footprints: 1 where the cell center lies
/// inside some box.
pub fn footprint_raster(boxes: &[Box3d], grid: BevGrid) -> Tensor {
    let mut t = Tensor::zeros(&[grid.side, grid.side]);
    for r in 0..grid.side {
        for c in 0..grid.side {
            let (x, y) = grid.cell_center(r, c);
            if boxes.iter().any(|b| b.contains_xy(x, y)) {
                t.data_mut()[r * grid.side + c] = 1.0;
            }
        }
    }
    t
}

fn sample_road<R: Rng>(cfg: &RunConfig, along_x: bool, rng: &mut R) -> Road {
    let s = &cfg.scene;
    let cell = cfg.grid.bev_cell;
    let half = cfg.grid.bev_side as f64 * cell / 2.0;
    let d_lo = (s.divider_width[0] / cell).ceil() as usize;
    let d_hi = ((s.divider_width[1] / cell).floor() as usize).max(d_lo);
    let d = rng.gen_range(d_lo..=d_hi).max(1);
    let lane_lo = (((s.road_width[0] / cell).ceil() as usize).saturating_sub(d)).div_ceil(2).max(1);
    let lane_hi = ((((s.road_width[1] / cell).floor() as usize).saturating_sub(d)) / 2).max(lane_lo);
    let lane = rng.gen_range(lane_lo..=lane_hi);
    let total = d + 2 * lane;
    // lower edge on the cell lattice with the road center within half/2 of the ego
    let center_cells = half / cell;
    let k_min = (center_cells / 2.0 - total as f64 / 2.0).ceil() as i64;
    let k_max = (1.5 * center_cells - total as f64 / 2.0).floor() as i64;
    let k = rng.gen_range(k_min..=k_max.max(k_min));
    let lo = k as f64 * cell - half;
    Road {
        along_x,
        lo,
        hi: lo + total as f64 * cell,
        divider_lo: lo + lane as f64 * cell,
        divider_hi: lo + (lane + d) as f64 * cell,
    }
}

fn separated(a: &Box3d, b: &Box3d, gap: f64) -> bool {
    let ext = |bx: &Box3d| {
        let (s, c) = bx.yaw.sin_cos();
        (
            (c * bx.l).abs() / 2.0 + (s * bx.w).abs() / 2.0,
            (s * bx.l).abs() / 2.0 + (c * bx.w).abs() / 2.0,
        )
    };
    let (ax, ay) = ext(a);
    let (bx, by) = ext(b);
    (a.x - b.x).abs() > ax + bx + gap || (a.y - b.y).abs() > ay + by + gap
}

fn box_visible(rig: &CameraRig, b: &Box3d) -> bool {
    !rig.visibility_sets(&[[b.x, b.y, b.z]])[0].is_empty()
}

fn sample_boxes<R: Rng>(cfg: &RunConfig, rig: &CameraRig, roads: &[Road], rng: &mut R) -> Vec<Box3d> {
    let s = &cfg.scene;
    let n = rng.gen_range(s.min_objects..=s.max_objects);
    let (r_in, r_out) = (cfg.grid.r_min + 2.0, cfg.grid.r_max - 2.5);
    let mut boxes: Vec<Box3d> = Vec::with_capacity(n);
    let mut tries = 0;
    while boxes.len() < n && tries < 200 {
        tries += 1;
        let class = rng.gen_range(0..s.class_sizes.len());
        let [l, w, h] = s.class_sizes[class];
        let along = rng.gen_range(-r_out..r_out);
        let (x, y, yaw) = match roads.choose(rng) {
            Some(road) => {
                let lane_w = road.divider_lo - road.lo;
                let across = if rng.gen_bool(0.5) { road.lo + lane_w / 2.0 } else { road.hi - lane_w / 2.0 };
                if road.along_x {
                    (along, across, 0.0)
                } else {
                    (across, along, std::f64::consts::FRAC_PI_2)
                }
            }
            None => (along, rng.gen_range(-r_out..r_out), 0.0),
        };
        let r = x.hypot(y);
        if r < r_in || r > r_out {
            continue;
        }
        let b = Box3d { class, x, y, z: h / 2.0, l, w, h, yaw, vx: 0.0, vy: 0.0 };
        if boxes.iter().all(|o| separated(o, &b, 0.5)) && box_visible(rig, &b) {
            boxes.push(b);
        }
    }
    boxes
}

/// Deterministic scene for `seed`.
pub fn gen_scene(seed: u64, cfg: &RunConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = build_rig(cfg)?;
    let n_roads = rng.gen_range(cfg.scene.min_roads..=cfg.scene.max_roads);
    let first_x = rng.gen_bool(0.5);
    let roads: Vec<Road> = (0..n_roads).map(|i| sample_road(cfg, first_x ^ (i % 2 == 1), &mut rng)).collect();
    let boxes = sample_boxes(cfg, &rig, &roads, &mut rng);
    let images = (0..rig.n_views()).map(|v| render_view(&rig, v, &roads, &boxes)).collect();
    let raster_grid = cfg.grid.bev()?.refined(cfg.heads.seg_ratio);
    let rasters = cfg.loss.elements.iter().map(|e| rasterize(e, &roads, raster_grid)).collect();
    Ok(SyntheticScene { seed, rig, images, boxes, roads, elements: cfg.loss.elements.clone(), rasters })
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    seed: u64,
    elements: Vec<String>,
    #[serde(default)]
    roads: Vec<Road>,
    #[serde(default)]
    boxes: Vec<Box3d>,
    rig: RigFile,
}

pub const SCENE_FILE: &str = "scene.toml";

/// Writes `scene.toml`, `image_v{t}.egt` and `raster_{element}.egt` into `dir`.
pub fn save_scene(scene: &SyntheticScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let file = SceneFile {
        seed: scene.seed,
        elements: scene.elements.clone(),
        roads: scene.roads.clone(),
        boxes: scene.boxes.clone(),
        rig: scene.rig.to_file(),
    };
    std::fs::write(dir.join(SCENE_FILE), toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))?)?;
    for (t, img) in scene.images.iter().enumerate() {
        img.save(dir.join(format!("image_v{t}.egt")))?;
    }
    for (e, r) in scene.elements.iter().zip(&scene.rasters) {
        r.save(dir.join(format!("raster_{e}.egt")))?;
    }
    Ok(())
}

fn scene_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Loads a scene from its directory or its `scene.toml`.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SyntheticScene> {
    let dir = scene_dir(path.as_ref());
    let file: SceneFile = toml::from_str(&std::fs::read_to_string(dir.join(SCENE_FILE))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let rig = file.rig.into_rig()?;
    let images = (0..rig.n_views())
        .map(|t| Tensor::load(dir.join(format!("image_v{t}.egt"))))
        .collect::<Result<Vec<_>>>()?;
    let rasters = file
        .elements
        .iter()
        .map(|e| Tensor::load(dir.join(format!("raster_{e}.egt"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene { seed: file.seed, rig, images, boxes: file.boxes, roads: file.roads, elements: file.elements, rasters })
}

/// Every scene directory directly under `dir`, in name order.
pub fn load_scene_set(dir: impl AsRef<Path>) -> Result<Vec<SyntheticScene>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SCENE_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::config(format!("no scenes under {}", dir.as_ref().display())));
    }
    dirs.iter().map(load_scene).collect()
}
