//! Layers with hand-written backward passes over NHWC activation matrices.

mod backbone;
mod layers;
mod tensor;

pub use backbone::{BackboneConfig, Block, ConvBn, ExtractorTape, FeatureExtractor, ResidualKind};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BnCache, BnConfig,
    Conv2d, Geometry, Linear, Mode,
};
pub use tensor::{Matrix, Param};
