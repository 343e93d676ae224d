//! Fine stage: per-granularity patch embedding and adapters around a shared
//! stack of windowed attention blocks, plus FLOPs accounting and a toy
//! training loop.

mod config;
pub mod flops;
mod forward;
mod params;
pub mod train;
pub mod window;

use thiserror::Error;

use crate::complexity::ComplexityError;
use crate::estimator::EstimatorError;
use crate::image::ImageError;
use crate::tensor::TensorError;

pub use config::{GranularityConfig, ModelConfig, SingleBranch};
pub use forward::{
    adapt_in, adapt_out, block_forward, classify, forward_fine, forward_logits, patch_embed, patch_matrix,
    route_and_forward, window_mhsa, AttentionRecord, BlockContext, ForwardTrace, Routed,
};
pub use params::{
    adapter_in_name, adapter_out_name, block_name, checkpoint_paths, embed_name, head_name, is_no_decay,
    rel_bias_name, InitOptions, ModelParams, INIT_STD,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window {window} does not tile a grid of side {side}")]
    Window { side: usize, window: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Complexity(#[from] ComplexityError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}
