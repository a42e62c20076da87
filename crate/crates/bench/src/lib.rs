//! Fixtures shared by the benchmarks.

use ego3rt::harness::model::{Model, Pipeline};
use ego3rt::harness::scene::{gen_scene, SyntheticScene};
use ego3rt::harness::train::{prepare_scene, TrainScene};
use ego3rt::harness::RunConfig;

/// The desk-scale configuration: 4 cameras at 64x64, 8x32 eyes, 32x32 BEV.
pub fn desk_config() -> RunConfig {
    RunConfig::default()
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub pipe: Pipeline,
    pub model: Model,
    pub scene: SyntheticScene,
    pub train: TrainScene,
}

pub fn fixture() -> Fixture {
    let cfg = desk_config();
    let pipe = Pipeline::new(&cfg).expect("pipeline");
    let model = Model::new(&cfg).expect("model");
    let scene = gen_scene(0, &cfg).expect("scene");
    let train = prepare_scene(scene.clone(), &pipe, &cfg).expect("targets");
    Fixture { cfg, pipe, model, scene, train }
}
