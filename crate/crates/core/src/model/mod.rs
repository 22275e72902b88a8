//! The pure-Mamba causal language model: configuration, parameters, the
//! stabilised block, and the training loss.

mod block;
mod config;
mod lm;
mod params;

pub use block::{mamba_block_forward, mamba_block_probe, BlockCache, BlockProbe};
pub use config::ModelConfig;
pub use lm::{batch_loss, loss_and_grad, model_forward, BatchLoss, ModelCache, TrainWindow};
pub use params::{init_params, LayerParams, Params};

pub use crate::kernels::{cross_entropy as loss, LossOutput};

pub(crate) use lm::{check_tokens, forward_with_meter, LogitRows};
