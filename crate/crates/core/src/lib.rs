//! Complexity-routed multi-granularity vision transformer.
//!
//! A training-free coarse stage scores each image with three descriptors
//! (edge density, intensity entropy, high-frequency energy) and routes it to
//! one of three patch/window granularities. The fine stage embeds the image
//! at that granularity, maps tokens into a shared width, runs a shared stack
//! of windowed attention blocks and classifies.

pub mod complexity;
pub mod estimator;
pub mod image;
pub mod model;
pub mod tensor;

pub use complexity::{
    assign_granularity, extract_features, fuse_score, thresholds_from_raw, CoarseStage, ComplexityFeatures,
    DescriptorConfig, EstimatorParams, Granularity, Thresholds,
};
pub use estimator::{ComplexityCorpus, CoarseTrainConfig, PseudoTargets};
pub use image::{GrayImage, RgbImage, SyntheticKind, SyntheticSpec};
pub use model::{GranularityConfig, ModelConfig, ModelParams};
pub use tensor::{Graph, ParamStore, Tensor, Var};
