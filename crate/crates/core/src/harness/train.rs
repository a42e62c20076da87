//! SGD-with-momentum training over synthetic scenes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::decoder::SceneInput;
use crate::error::{Error, Result};
use crate::harness::augment::{transform_boxes, Transform, Warp};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::RunConfig;
use crate::harness::model::{loss_and_grads, Model, Pipeline};
use crate::harness::scene::{gen_scene, load_scene_set, SyntheticScene};
use crate::harness::targets::build_targets;
use crate::losses::{LossBreakdown, Targets};
use crate::params::{is_frozen, Params};

/// Worker threads from `EGO3RT_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("EGO3RT_THREADS").ok()?.trim().parse().ok().filter(|n: &usize| *n > 0)
}

pub(crate) fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(e.to_string()))
}

/// A scene ready for training.
pub struct TrainScene {
    pub scene: SyntheticScene,
    pub input: SceneInput,
    pub targets: Targets,
}

pub fn prepare_scene(scene: SyntheticScene, pipe: &Pipeline, cfg: &RunConfig) -> Result<TrainScene> {
    let targets = build_targets(&scene.boxes, &scene.rasters, pipe.bev, &pipe.seg_mask, &cfg.loss, cfg.heads.heatmap_radius)?;
    Ok(TrainScene { input: scene.input()?, scene, targets })
}

/// Training scenes named by the configuration: loaded from `scenes_dir`, or
/// generated from seeds `seed .. seed + scenes`.
pub fn training_scenes(cfg: &RunConfig) -> Result<Vec<SyntheticScene>> {
    match &cfg.train.scenes_dir {
        Some(dir) => load_scene_set(dir),
        None => {
            let seeds: Vec<u64> = (0..cfg.train.scenes as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
            pool()?.install(|| seeds.par_iter().map(|&s| gen_scene(s, cfg)).collect())
        }
    }
}

/// Per-parameter momentum buffers.
pub struct Sgd {
    velocity: Model,
    frozen: Vec<bool>,
}

impl Sgd {
    pub fn new(model: &Model, freeze: &[String]) -> Self {
        let frozen = model
            .named()
            .iter()
            .map(|(n, _)| is_frozen(n) || freeze.iter().any(|p| n.starts_with(p.as_str())))
            .collect();
        Sgd { velocity: model.zeros_like(), frozen }
    }

    /// Global norm over the trainable gradients.
    pub fn grad_norm(&self, grads: &Model) -> f64 {
        grads
            .named()
            .iter()
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|((_, g), _)| g.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// Clips to `clip` (0 disables) and applies one momentum step.
    pub fn step(&mut self, model: &mut Model, grads: &Model, lr: f64, momentum: f64, clip: f64) -> f64 {
        let norm = self.grad_norm(grads);
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let g = grads.named();
        let v = self.velocity.named_mut();
        for ((((_, p), (_, g)), (_, v)), frozen) in model.named_mut().into_iter().zip(g).zip(v).zip(&self.frozen) {
            if *frozen {
                continue;
            }
            for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = momentum * *v + scale * g;
                *p -= lr * *v;
            }
        }
        norm
    }
}

/// One line of the loss log, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
}

pub fn csv_header(cfg: &RunConfig) -> String {
    let mut h = String::from("step,total");
    for g in 0..cfg.loss.group_list().len() {
        write!(h, ",cls_{g},box_{g}").unwrap();
    }
    for e in &cfg.loss.elements {
        write!(h, ",seg_{e}").unwrap();
    }
    h.push_str(",grad_norm");
    h
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        let b = &self.breakdown;
        let mut s = format!("{},{:e}", self.step, b.total);
        for (c, x) in b.cls.iter().zip(&b.boxes) {
            write!(s, ",{c:e},{x:e}").unwrap();
        }
        for v in &b.seg {
            write!(s, ",{v:e}").unwrap();
        }
        write!(s, ",{:e}", self.grad_norm).unwrap();
        s
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Targets and warp for scene `index` at `step`.
fn augmented_targets(ts: &TrainScene, pipe: &Pipeline, cfg: &RunConfig, step: usize, index: usize) -> Result<(Targets, Option<Warp>)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, step as u64), index as u64));
    let t = Transform::sample(&cfg.augment, &mut rng);
    if t.is_identity() {
        return Ok((ts.targets.clone(), None));
    }
    let (boxes, cropped) = transform_boxes(&t, &ts.scene.boxes, pipe.bev);
    let kept: Vec<_> = boxes.into_iter().zip(cropped).filter(|(_, c)| !c).map(|(b, _)| b).collect();
    let seg_warp = Warp::new(&t, pipe.seg_grid);
    let rasters = ts.scene.rasters.iter().map(|r| seg_warp.forward(r)).collect::<Result<Vec<_>>>()?;
    let seg_mask = seg_warp.warp_mask(&pipe.seg_mask);
    let targets = build_targets(&kept, &rasters, pipe.bev, &seg_mask, &cfg.loss, cfg.heads.heatmap_radius)?;
    Ok((targets, Some(Warp::new(&t, pipe.bev))))
}

/// Loss and gradient averaged over `batch` (scene indices), reduced in order.
pub fn batch_step(model: &Model, pipe: &Pipeline, scenes: &[TrainScene], batch: &[usize], cfg: &RunConfig, step: usize) -> Result<(LossBreakdown, Model)> {
    let parts: Vec<Result<(LossBreakdown, Model)>> = batch
        .par_iter()
        .map(|&i| {
            let (targets, warp) = augmented_targets(&scenes[i], pipe, cfg, step, i)?;
            loss_and_grads(model, pipe, &scenes[i].input, &targets, warp.as_ref(), cfg)
        })
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut total: Option<(LossBreakdown, Model)> = None;
    for p in parts {
        let (b, g) = p?;
        match &mut total {
            None => total = Some((b, g)),
            Some((tb, tg)) => {
                tb.total += b.total;
                for (a, x) in tb.cls.iter_mut().zip(&b.cls) {
                    *a += x;
                }
                for (a, x) in tb.boxes.iter_mut().zip(&b.boxes) {
                    *a += x;
                }
                for (a, x) in tb.seg.iter_mut().zip(&b.seg) {
                    *a += x;
                }
                for ((_, a), (_, x)) in tg.named_mut().into_iter().zip(g.named()) {
                    a.add_assign(x);
                }
            }
        }
    }
    let (mut b, mut g) = total.ok_or_else(|| Error::config("empty batch"))?;
    if batch.len() > 1 {
        b.total *= inv;
        b.cls.iter_mut().chain(b.boxes.iter_mut()).chain(b.seg.iter_mut()).for_each(|v| *v *= inv);
        g.visit_mut("", &mut |_, t| t.scale_assign(inv));
    }
    Ok((b, g))
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
    /// Manifest of the final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

fn dump_diagnostic(dir: Option<&Path>, step: usize, batch: &[usize], what: &str, model: &Model) -> Error {
    let mut text = format!("non-finite loss at step {step}\nscenes {batch:?}\n{what}\n");
    for (n, t) in model.named() {
        writeln!(text, "{n} norm={:e} finite={}", t.sum_sq().sqrt(), t.is_finite()).unwrap();
    }
    if let Some(d) = dir {
        let _ = std::fs::create_dir_all(d).and_then(|_| std::fs::write(d.join("diagnostic.txt"), &text));
    }
    Error::Numeric(format!("non-finite loss at step {step}"))
}

/// Runs `cfg.train.steps` steps from `model` on `scenes`. With `out`, writes
/// `loss.csv`, periodic checkpoints under `ckpt_{step}` and the final one
/// under `final`.
pub fn train_on(cfg: &RunConfig, scenes: Vec<SyntheticScene>, mut model: Model, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::config("no training scenes"));
    }
    let pipe = Pipeline::new(cfg)?;
    let scenes = scenes.into_iter().map(|s| prepare_scene(s, &pipe, cfg)).collect::<Result<Vec<_>>>()?;
    let t = &cfg.train;
    let mut sgd = Sgd::new(&model, &t.freeze);
    let mut log = Vec::with_capacity(t.steps);
    let mut csv = csv_header(cfg);
    csv.push('\n');
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("config.toml"), cfg.to_toml()?)?;
    }
    let pool = pool()?;
    for step in 0..t.steps {
        let batch: Vec<usize> = (0..t.batch).map(|k| (step * t.batch + k) % scenes.len()).collect();
        let (b, grads) = match pool.install(|| batch_step(&model, &pipe, &scenes, &batch, cfg, step)) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => return Err(dump_diagnostic(out, step, &batch, &msg, &model)),
            Err(e) => return Err(e),
        };
        if !b.total.is_finite() {
            return Err(dump_diagnostic(out, step, &batch, &format!("loss {b:?}"), &model));
        }
        let grad_norm = sgd.step(&mut model, &grads, t.lr, t.momentum, t.grad_clip);
        if step % 100 == 0 || step + 1 == t.steps {
            log::info!("step {step} loss {:.5} grad norm {grad_norm:.4}", b.total);
        }
        let rec = LossRecord { step, breakdown: b, grad_norm };
        csv.push_str(&rec.csv_line());
        csv.push('\n');
        log.push(rec);
        if let Some(d) = out {
            if t.checkpoint_every > 0 && (step + 1) % t.checkpoint_every == 0 && step + 1 < t.steps {
                save_checkpoint(&model, cfg, step + 1, d.join(format!("ckpt_{}", step + 1)))?;
                std::fs::write(d.join("loss.csv"), &csv)?;
            }
        }
    }
    let checkpoint = match out {
        Some(d) => {
            std::fs::write(d.join("loss.csv"), &csv)?;
            Some(save_checkpoint(&model, cfg, t.steps, d.join("final"))?)
        }
        None => None,
    };
    Ok(TrainOutcome { model, log, checkpoint })
}

/// Full run: scenes and initial model from the configuration, artifacts
/// under `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let scenes = training_scenes(cfg)?;
    let model = match &cfg.train.init_checkpoint {
        Some(p) => load_checkpoint(p, Some(cfg))?.0,
        None => Model::new(cfg)?,
    };
    train_on(cfg, scenes, model, Some(&cfg.output_dir))
}
