pub mod attention;
pub mod boxes;
pub mod camera;
pub mod decoder;
pub mod error;
pub mod eyes;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};
pub use numerics::Tensor;
