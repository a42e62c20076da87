//! Synthetic scenes, training, evaluation and visualization around the decoder.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod scene;
pub mod targets;
pub mod train;
pub mod viz;

pub use augment::{bev_augment, Transform, Warp};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use eval::{decode_detections, evaluate, Evaluation};
pub use model::{infer, loss_and_grads, Model, Outputs, Pipeline};
pub use scene::{gen_scene, load_scene, load_scene_set, save_scene, SyntheticScene, ELEMENTS};
pub use targets::build_targets;
pub use train::{train, train_on, LossRecord, TrainOutcome};
