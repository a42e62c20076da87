//! Run configuration: one nested TOML document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::eyes::{BevGrid, EyeGrid};
use crate::heads::upsample_factors;
use crate::losses::LossConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub views: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub pitch_deg: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_roads: usize,
    pub max_roads: usize,
    /// Road width range in meters, including the divider.
    pub road_width: [f64; 2],
    pub divider_width: [f64; 2],
    /// `[l, w, h]` per class, meters.
    pub class_sizes: Vec<[f64; 3]>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            views: 4,
            image_width: 64,
            image_height: 64,
            hfov_deg: 100.0,
            camera_height: 1.6,
            pitch_deg: 25.0,
            min_objects: 1,
            max_objects: 4,
            min_roads: 1,
            max_roads: 2,
            road_width: [7.0, 10.0],
            divider_width: [3.0, 4.0],
            class_sizes: vec![[3.6, 1.8, 1.5], [4.6, 2.0, 2.0]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub radial: usize,
    pub rays: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub eye_height: f64,
    pub bev_side: usize,
    pub bev_cell: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { radial: 8, rays: 32, r_min: 1.0, r_max: 8.0, eye_height: 0.0, bev_side: 32, bev_cell: 0.5 }
    }
}

impl GridConfig {
    pub fn eye_grid(&self) -> Result<EyeGrid> {
        EyeGrid::build(self.radial, self.rays, self.r_min, self.r_max, self.eye_height)
    }

    pub fn bev(&self) -> Result<BevGrid> {
        BevGrid::new(self.bev_side, self.bev_cell)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub encoder_blocks: usize,
    pub seg_hidden: usize,
    /// Segmentation raster side over BEV side.
    pub seg_ratio: usize,
    pub heatmap_radius: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig { encoder_blocks: 2, seg_hidden: 16, seg_ratio: 3, heatmap_radius: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per step; gradients are averaged.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    /// Number of generated training scenes (seeds `seed`, `seed + 1`, ...).
    pub scenes: usize,
    /// Train on scenes from this directory instead of generating them.
    pub scenes_dir: Option<PathBuf>,
    /// Parameter-name prefixes the optimizer leaves untouched.
    pub freeze: Vec<String>,
    /// Start from this checkpoint instead of a fresh model.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 1,
            lr: 0.02,
            momentum: 0.9,
            grad_clip: 5.0,
            checkpoint_every: 500,
            scenes: 4,
            scenes_dir: None,
            freeze: Vec::new(),
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub probability: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub rotate: bool,
    pub scale: bool,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            probability: 0.5,
            flip_x: true,
            flip_y: true,
            rotate: true,
            scale: true,
            max_rotation_deg: 22.5,
            scale_range: [0.95, 1.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_threshold: 0.3, iou_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneConfig,
    pub grid: GridConfig,
    pub decoder: DecoderConfig,
    pub heads: HeadsConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            scene: SceneConfig::default(),
            grid: GridConfig::default(),
            decoder: DecoderConfig::default(),
            heads: HeadsConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Hash of the fields that determine parameter names and shapes.
    pub fn model_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Shape<'a> {
            views: usize,
            decoder: &'a DecoderConfig,
            heads: &'a HeadsConfig,
            classes: &'a [String],
            groups: Vec<Vec<usize>>,
            elements: &'a [String],
        }
        let shape = Shape {
            views: self.scene.views,
            decoder: &self.decoder,
            heads: &self.heads,
            classes: &self.loss.classes,
            groups: self.loss.group_list(),
            elements: &self.loss.elements,
        };
        let text = toml::to_string(&shape).map_err(|e| Error::config(e.to_string()))?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.views == 0 || s.image_width < 2 || s.image_height < 2 {
            return Err(Error::config("scene needs at least one view and 2x2 images"));
        }
        if !(s.hfov_deg > 0.0 && s.hfov_deg < 180.0) || !(s.camera_height > 0.0) {
            return Err(Error::config("camera field of view must be in (0, 180) and height positive"));
        }
        if s.min_objects > s.max_objects || s.min_roads > s.max_roads {
            return Err(Error::config("min counts exceed max counts"));
        }
        for r in [s.road_width, s.divider_width] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::config("width ranges must be positive and ordered"));
            }
        }
        if s.class_sizes.len() != self.loss.classes.len() {
            return Err(Error::config(format!(
                "{} class sizes for {} classes",
                s.class_sizes.len(),
                self.loss.classes.len()
            )));
        }
        if s.class_sizes.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::config("class sizes must be positive"));
        }
        for e in &self.loss.elements {
            if !crate::harness::scene::ELEMENTS.contains(&e.as_str()) {
                return Err(Error::config(format!(
                    "unknown segmentation element {e:?}; known: {:?}",
                    crate::harness::scene::ELEMENTS
                )));
            }
        }
        self.grid.eye_grid().map_err(|e| Error::config(e.to_string()))?;
        self.grid.bev().map_err(|e| Error::config(e.to_string()))?;
        self.decoder.validate()?;
        self.loss.validate()?;
        upsample_factors(self.heads.seg_ratio)?;
        if self.heads.encoder_blocks > 0 && self.decoder.dim < 2 {
            return Err(Error::config("encoder needs dim >= 2"));
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.grad_clip >= 0.0) {
            return Err(Error::config("lr and grad_clip must be >= 0, momentum in [0, 1)"));
        }
        if t.batch == 0 || (t.scenes == 0 && t.scenes_dir.is_none()) {
            return Err(Error::config("batch and scene count must be positive"));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.probability) || !(a.scale_range[0] > 0.0 && a.scale_range[0] <= a.scale_range[1]) {
            return Err(Error::config("augmentation probability or scale range out of range"));
        }
        if !(0.0..=1.0).contains(&self.eval.score_threshold) || !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::config("evaluation thresholds must be in [0, 1]"));
        }
        Ok(())
    }
}
