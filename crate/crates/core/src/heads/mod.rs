//! BEV encoder and task heads.

pub mod detection;
pub mod encoder;
pub mod segmentation;

pub use detection::{detection_head, DetOutput, DetectionParams, GroupHead, HEATMAP_BIAS_INIT};
pub use encoder::{bev_encoder, BottleneckParams, EncoderParams};
pub use segmentation::{segmentation_head, upsample_factors, SegBlock, SegBranch, SegmentationParams};
